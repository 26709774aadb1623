use rand::Rng;

use super::{expect_channels, feature_dims};
use crate::autodiff::{Graph, PadMode, Var};
use crate::error::Result;
use crate::params::{ParamBuilder, Scope};

/// Hidden width of the gated feed-forward network.
pub fn gfn_hidden(c: usize, ratio: f64) -> usize {
    ((c as f64 * ratio).floor() as usize).max(1)
}

pub fn init_gfn<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize, ratio: f64) {
    let hidden = gfn_hidden(c, ratio);
    b.linear("in", c, 2 * hidden);
    b.depthwise("dw", 3, 2 * hidden);
    b.linear("out", hidden, c);
}

/// Gated feed-forward network: pointwise expansion, depthwise 3×3, GELU gate,
/// pointwise projection.
pub fn gfn(g: &Graph, x: &Var, p: &Scope<'_>) -> Result<Var> {
    feature_dims("gfn", x)?;
    expect_channels("gfn", x, p.get("w_in").shape()[0])?;
    let hidden = p.get("w_out").shape()[0];
    let t = g.linear(x, p.get("w_in"), Some(p.get("b_in")));
    let t = g.pad(&t, (1, 1, 1, 1), PadMode::Zero);
    let t = g.depthwise_conv2d(&t, p.get("w_dw"), p.get("b_dw"));
    let x1 = g.slice_last(&t, 0, hidden);
    let x2 = g.slice_last(&t, hidden, hidden);
    let gated = g.mul(&g.gelu(&x1), &x2);
    Ok(g.linear(&gated, p.get("w_out"), Some(p.get("b_out"))))
}
