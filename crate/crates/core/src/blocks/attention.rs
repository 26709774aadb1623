use rand::Rng;

use super::{expect_channels, feature_dims};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, Scope};

const NORM_EPS: f64 = 1e-12;

/// Output of a channel attention together with its attention matrix
/// `[B, heads, C/heads, C/heads]`.
pub struct AttentionOutput {
    pub out: Var,
    pub attention: Var,
}

pub fn init_channel_attention<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize, heads: usize) {
    b.linear("q", c, c);
    b.linear("k", c, c);
    b.linear("v", c, c);
    b.linear("out", c, c);
    b.ones("temperature", &[heads]);
}

/// `[B, H, W, C] -> [B, heads, C/heads, HW]`
fn to_heads(g: &Graph, x: &Var, heads: usize) -> Var {
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let t = g.reshape(x, &[b, h * w, heads, c / heads]);
    g.permute(&t, &[0, 2, 3, 1])
}

/// Multi-head transposed attention: channels are the tokens, the `HW`
/// positions are the feature axis. Queries come from `q_src`, keys and
/// values from `kv_src`; both must share shape.
pub fn channel_attention(
    g: &Graph,
    q_src: &Var,
    kv_src: &Var,
    p: &Scope<'_>,
    heads: usize,
) -> Result<AttentionOutput> {
    let (b, h, w, c) = feature_dims("channel_attention", q_src)?;
    if kv_src.shape() != q_src.shape() {
        return Err(Error::shape("channel_attention", format!("{:?}", q_src.shape()), kv_src.shape()));
    }
    expect_channels("channel_attention", q_src, p.get("w_q").shape()[0])?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape("channel_attention", format!("channels divisible by {heads} heads"), c));
    }
    let q = g.linear(q_src, p.get("w_q"), Some(p.get("b_q")));
    let k = g.linear(kv_src, p.get("w_k"), Some(p.get("b_k")));
    let v = g.linear(kv_src, p.get("w_v"), Some(p.get("b_v")));
    let q = g.l2_normalize_last(&to_heads(g, &q, heads), NORM_EPS);
    let k = g.l2_normalize_last(&to_heads(g, &k, heads), NORM_EPS);
    let v = to_heads(g, &v, heads);
    let logits = g.bmm(&q, false, &k, true);
    let logits = g.mul_heads(&logits, p.get("temperature"));
    let attention = g.softmax_last(&logits);
    let mixed = g.bmm(&attention, false, &v, false);
    let mixed = g.permute(&mixed, &[0, 3, 1, 2]);
    let mixed = g.reshape(&mixed, &[b, h, w, c]);
    let out = g.linear(&mixed, p.get("w_out"), Some(p.get("b_out")));
    Ok(AttentionOutput { out, attention })
}

/// Transposed self-attention.
pub fn tsa(g: &Graph, x: &Var, p: &Scope<'_>, heads: usize) -> Result<Var> {
    Ok(channel_attention(g, x, x, p, heads)?.out)
}

/// Global reference attention: transposed cross-attention with queries from
/// the features and keys/values from the reference features.
pub fn gra(g: &Graph, features: &Var, reference: &Var, p: &Scope<'_>, heads: usize) -> Result<Var> {
    Ok(channel_attention(g, features, reference, p, heads)?.out)
}
