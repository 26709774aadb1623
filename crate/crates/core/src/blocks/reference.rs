use rand::Rng;

use super::attention::AttentionOutput;
use super::{expect_channels, feature_dims, SoftmaxAxis};
use crate::autodiff::{Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::image::TensorImage;
use crate::params::{ParamBuilder, Scope};

/// Two-layer perceptron `C_text -> C -> C` with GELU in between.
pub fn init_text_projection<R: Rng>(b: &mut ParamBuilder<'_, R>, c_text: usize, c: usize) {
    b.linear("l1", c_text, c);
    b.linear("l2", c, c);
}

/// Projects text tokens `[B, N, C_text]` to `[B, N, C]`.
pub fn text_projection(g: &Graph, tokens: &Var, p: &Scope<'_>) -> Result<Var> {
    let c_text = p.get("w_l1").shape()[0];
    match *tokens.shape() {
        [_, n, ct] if n > 0 && ct == c_text => {}
        _ => return Err(Error::shape("text_projection", format!("[B, N, {c_text}]"), tokens.shape())),
    }
    let h = g.gelu(&g.linear(tokens, p.get("w_l1"), Some(p.get("b_l1"))));
    Ok(g.linear(&h, p.get("w_l2"), Some(p.get("b_l2"))))
}

pub fn init_reference_attention<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize) {
    b.linear_no_bias("q", c, c);
    b.linear_no_bias("k", c, c);
    b.linear_no_bias("v", c, c);
}

/// Cross-attention from every pixel of `x: [B, H, W, C]` to the projected text
/// tokens `tokens: [B, N, C]`, scaled by `1/sqrt(C)`. The attention matrix is
/// `[B, HW, N]`.
pub fn reference_attention(g: &Graph, x: &Var, tokens: &Var, p: &Scope<'_>) -> Result<AttentionOutput> {
    let (b, h, w, c) = feature_dims("reference_attention", x)?;
    expect_channels("reference_attention", x, p.get("w_q").shape()[0])?;
    match *tokens.shape() {
        [tb, n, tc] if tb == b && n > 0 && tc == c => {}
        _ => return Err(Error::shape("reference_attention", format!("[{b}, N, {c}]"), tokens.shape())),
    }
    let flat = g.reshape(x, &[b, h * w, c]);
    let q = g.linear(&flat, p.get("w_q"), None);
    let k = g.linear(tokens, p.get("w_k"), None);
    let v = g.linear(tokens, p.get("w_v"), None);
    let logits = g.scale(&g.bmm(&q, false, &k, true), 1.0 / (c as f64).sqrt());
    let attention = g.softmax_last(&logits);
    let out = g.bmm(&attention, false, &v, false);
    Ok(AttentionOutput { out: g.reshape(&out, &[b, h, w, c]), attention })
}

/// Resizes a batch of references to `(h, w)` and stacks them as `[B, h, w, 3]`.
pub fn reference_batch(refs: &[&TensorImage], h: usize, w: usize) -> crate::tensor::Tensor {
    let mut data = Vec::with_capacity(refs.len() * h * w * 3);
    for r in refs {
        data.extend(r.resize_bilinear(h, w).data().iter().map(|&v| v as f64));
    }
    crate::tensor::Tensor::new([refs.len(), h, w, 3], data)
}

/// `φ`: reflect-padded 3×3 convolution of a `[B, H, W, 3]` reference map.
pub fn project_reference_map(g: &Graph, reference: &Var, p: &Scope<'_>) -> Result<Var> {
    feature_dims("project_reference", reference)?;
    expect_channels("project_reference", reference, 3)?;
    let padded = g.pad(reference, (1, 1, 1, 1), PadMode::Reflect);
    Ok(g.conv2d(&padded, p.get("w_phi"), Some(p.get("b_phi")), 1))
}

/// Bilinear-resizes `reference` to `(height, width)` and projects it to the
/// block channel count.
pub fn project_reference(
    g: &Graph,
    reference: &TensorImage,
    height: usize,
    width: usize,
    p: &Scope<'_>,
) -> Result<Var> {
    if height == 0 || width == 0 {
        return Err(Error::shape("project_reference", "non-empty target", (height, width)));
    }
    let map = g.constant(reference_batch(&[reference], height, width));
    project_reference_map(g, &map, p)
}

pub fn init_lra<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize) {
    b.conv("1", 3, c, c);
    b.conv("2", 3, c, c);
    b.conv("a", 3, c, c);
}

fn conv3(g: &Graph, x: &Var, p: &Scope<'_>, name: &str) -> Var {
    let padded = g.pad(x, (1, 1, 1, 1), PadMode::Zero);
    g.conv2d(&padded, p.get(&format!("w_{name}")), Some(p.get(&format!("b_{name}"))), 1)
}

/// Local reference attention. Returns the aggregated features and the
/// similarity map (same shape as the features).
pub fn lra(
    g: &Graph,
    features: &Var,
    reference: &Var,
    p: &Scope<'_>,
    axis: SoftmaxAxis,
) -> Result<AttentionOutput> {
    let (b, h, w, c) = feature_dims("lra", features)?;
    if reference.shape() != features.shape() {
        return Err(Error::shape("lra", format!("{:?}", features.shape()), reference.shape()));
    }
    expect_channels("lra", features, p.get("w_1").shape()[2])?;
    let embed = |x: &Var| {
        let t = g.relu(&conv3(g, x, p, "1"));
        conv3(g, &t, p, "2")
    };
    let f_j = embed(features);
    let f_k = embed(reference);
    let logits = conv3(g, &g.add(&f_j, &f_k), p, "a");
    let sim = match axis {
        SoftmaxAxis::Channel => g.softmax_last(&logits),
        SoftmaxAxis::Spatial => {
            let t = g.reshape(&logits, &[b, h * w, c]);
            let t = g.permute(&t, &[0, 2, 1]);
            let t = g.softmax_last(&t);
            let t = g.permute(&t, &[0, 2, 1]);
            g.reshape(&t, &[b, h, w, c])
        }
    };
    let out = g.add(&f_j, &g.mul(&sim, &f_k));
    Ok(AttentionOutput { out, attention: sim })
}
