use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, Scope};

/// Per-channel modulation produced by the degradation embedding adapter.
/// Each field is `[B, C]`.
pub struct ModulationParams {
    pub gate_attn: Var,
    pub gate_ffn: Var,
    pub scale_attn: Var,
    pub shift_attn: Var,
    pub scale_ffn: Var,
    pub shift_ffn: Var,
}

/// `W_linear` is zero-initialized so a fresh adapter yields gates and scales
/// of one and shifts of zero.
pub fn init_dea<R: Rng>(b: &mut ParamBuilder<'_, R>, c_prompt: usize, c_block: usize) {
    b.linear("adapt", c_prompt, c_block);
    b.zeros("w_linear", &[c_block, 6 * c_block]);
    b.zeros("b_linear", &[6 * c_block]);
}

/// Degradation embedding adapter. `z_d: [B, N, C_p]`.
///
/// Tokens are mean-pooled, passed through `silu(W_adapt ·)`, projected to
/// `6·C` and split in order (gate_attn, gate_ffn, scale_attn, shift_attn,
/// scale_ffn, shift_ffn). Gates and scales are offset by one.
pub fn dea(g: &Graph, z_d: &Var, p: &Scope<'_>) -> Result<ModulationParams> {
    let c_prompt = p.get("w_adapt").shape()[0];
    match *z_d.shape() {
        [_, n, cp] if n > 0 && cp == c_prompt => {}
        _ => return Err(Error::shape("dea", format!("[B, N, {c_prompt}]"), z_d.shape())),
    }
    let c = p.get("w_adapt").shape()[1];
    let pooled = g.mean_axis(z_d, 1);
    let adapted = g.silu(&g.linear(&pooled, p.get("w_adapt"), Some(p.get("b_adapt"))));
    let e = g.linear(&adapted, p.get("w_linear"), Some(p.get("b_linear")));
    let part = |i: usize| g.slice_last(&e, i * c, c);
    Ok(ModulationParams {
        gate_attn: g.add_scalar(&part(0), 1.0),
        gate_ffn: g.add_scalar(&part(1), 1.0),
        scale_attn: g.add_scalar(&part(2), 1.0),
        shift_attn: part(3),
        scale_ffn: g.add_scalar(&part(4), 1.0),
        shift_ffn: part(5),
    })
}
