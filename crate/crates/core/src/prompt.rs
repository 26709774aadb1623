//! Query-based prompt encoder.
//!
//! A small residual CNN summarizes the degraded image into a global vector
//! `I_d`. Learnable queries attend to themselves, then cross-attend to the
//! degradation text tokens and to `I_d` (as a single token); the sum of the
//! two readouts goes through a feed-forward layer to give `Z_d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, Scope};
use crate::tensor::Tensor;

/// Minimum side accepted by the image encoder.
pub const MIN_IMAGE_SIDE: usize = 16;

const RES_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Prompt width `C_p`.
    pub c_prompt: usize,
    /// Number of learnable queries `N̂`.
    pub n_queries: usize,
    /// Text encoder width `C_text`.
    pub c_text: usize,
    /// Heads of the query self-attention.
    pub heads: usize,
    /// Width of the residual image encoder.
    pub image_channels: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { c_prompt: 256, n_queries: 8, c_text: 768, heads: 8, image_channels: 32 }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_prompt == 0 || self.n_queries == 0 || self.c_text == 0 || self.image_channels == 0 {
            return Err(Error::InvalidConfig("prompt encoder sizes must be positive".into()));
        }
        if self.heads == 0 || !self.c_prompt.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "prompt width {} not divisible by {} heads",
                self.c_prompt, self.heads
            )));
        }
        Ok(())
    }
}

/// Refined degradation tokens `Z_d: [N̂, C_p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedDegradation(pub Tensor);

impl RefinedDegradation {
    pub fn tokens(&self) -> &Tensor {
        &self.0
    }

    /// Token mean, `[C_p]`.
    pub fn pooled(&self) -> Vec<f64> {
        let (n, c) = (self.0.dim(0), self.0.dim(1));
        (0..c).map(|k| (0..n).map(|i| self.0.data()[i * c + k]).sum::<f64>() / n as f64).collect()
    }
}

/// Global image feature `I_d: [C_p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGlobalFeature(pub Vec<f64>);

pub fn init_image_encoder<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &PromptConfig) {
    let c = cfg.image_channels;
    b.conv("stem", 3, 3, c);
    for i in 0..RES_BLOCKS {
        let mut blk = b.sub(format!("res{i}"));
        blk.conv("1", 3, c, c);
        blk.conv("2", 3, c, c);
        if i + 1 < RES_BLOCKS {
            b.conv(&format!("down{i}"), 3, c, c);
        }
    }
    b.linear("head", c, cfg.c_prompt);
}

fn conv_reflect(g: &Graph, x: &Var, p: &Scope<'_>, name: &str, stride: usize) -> Var {
    let padded = g.pad(x, (1, 1, 1, 1), PadMode::Reflect);
    g.conv2d(&padded, p.get(&format!("w_{name}")), Some(p.get(&format!("b_{name}"))), stride)
}

/// `[B, H, W, 3] -> [B, C_p]`: stem, four residual blocks with stride-2
/// convolutions between them, global average pooling and a linear head.
/// All convolutions reflect-pad, so constant images give constant maps.
pub fn encode_degraded_image(g: &Graph, image: &Var, p: &Scope<'_>) -> Result<Var> {
    let (b, h, w, c) = match *image.shape() {
        [b, h, w, c] => (b, h, w, c),
        _ => return Err(Error::shape("encode_degraded_image", "[B, H, W, 3]", image.shape())),
    };
    if c != 3 {
        return Err(Error::shape("encode_degraded_image", "3 channels", image.shape()));
    }
    if h.min(w) < MIN_IMAGE_SIDE {
        return Err(Error::ImageTooSmall { height: h, width: w, min: MIN_IMAGE_SIDE });
    }
    let mut x = conv_reflect(g, image, p, "stem", 1);
    for i in 0..RES_BLOCKS {
        let blk = p.sub(format!("res{i}"));
        let t = g.relu(&conv_reflect(g, &x, &blk, "1", 1));
        let t = conv_reflect(g, &t, &blk, "2", 1);
        x = g.add(&x, &t);
        if i + 1 < RES_BLOCKS {
            x = conv_reflect(g, &x, p, &format!("down{i}"), 2);
        }
    }
    let (hh, ww, cc) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let flat = g.reshape(&x, &[b, hh * ww, cc]);
    let pooled = g.mean_axis(&flat, 1);
    Ok(g.linear(&pooled, p.get("w_head"), Some(p.get("b_head"))))
}

pub fn init_refiner<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &PromptConfig) {
    let cp = cfg.c_prompt;
    b.linear("e_proj", cfg.c_text, cp);
    b.uniform("queries", &[cfg.n_queries, cp], cp);
    let mut sa = b.sub("sa");
    sa.linear("q", cp, cp);
    sa.linear("k", cp, cp);
    sa.linear("v", cp, cp);
    sa.linear("out", cp, cp);
    for name in ["qp", "kd", "vd", "ki", "vi"] {
        b.linear_no_bias(name, cp, cp);
    }
    let mut ffn = b.sub("ffn");
    ffn.layer_norm("norm", cp);
    ffn.linear("1", cp, 4 * cp);
    ffn.linear("2", 4 * cp, cp);
}

/// Multi-head self-attention over `[B, N, C]` tokens.
fn self_attention(g: &Graph, x: &Var, p: &Scope<'_>, heads: usize) -> Var {
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = c / heads;
    let split = |t: Var| {
        let t = g.reshape(&t, &[b, n, heads, d]);
        g.permute(&t, &[0, 2, 1, 3])
    };
    let q = split(g.linear(x, p.get("w_q"), Some(p.get("b_q"))));
    let k = split(g.linear(x, p.get("w_k"), Some(p.get("b_k"))));
    let v = split(g.linear(x, p.get("w_v"), Some(p.get("b_v"))));
    let logits = g.scale(&g.bmm(&q, false, &k, true), 1.0 / (d as f64).sqrt());
    let attn = g.softmax_last(&logits);
    let out = g.bmm(&attn, false, &v, false);
    let out = g.permute(&out, &[0, 2, 1, 3]);
    let out = g.reshape(&out, &[b, n, c]);
    g.linear(&out, p.get("w_out"), Some(p.get("b_out")))
}

/// Single-head scaled dot-product attention.
fn cross_attention(g: &Graph, q: &Var, k: &Var, v: &Var) -> Var {
    let d = *q.shape().last().unwrap();
    let logits = g.scale(&g.bmm(q, false, k, true), 1.0 / (d as f64).sqrt());
    let attn = g.softmax_last(&logits);
    g.bmm(&attn, false, v, false)
}

/// `e_d: [B, N, C_text]`, `i_d: [B, C_p]` → `Z_d: [B, N̂, C_p]`.
pub fn refine_degradation(
    g: &Graph,
    e_d: &Var,
    i_d: &Var,
    p: &Scope<'_>,
    cfg: &PromptConfig,
) -> Result<Var> {
    let b = match *e_d.shape() {
        [b, n, c] if n > 0 && c == cfg.c_text => b,
        _ => {
            return Err(Error::shape(
                "refine_degradation",
                format!("[B, N, {}]", cfg.c_text),
                e_d.shape(),
            ))
        }
    };
    if i_d.shape() != [b, cfg.c_prompt] {
        return Err(Error::shape("refine_degradation", format!("[{b}, {}]", cfg.c_prompt), i_d.shape()));
    }
    let cp = cfg.c_prompt;
    let queries = g.reshape(p.get("queries"), &[1, cfg.n_queries, cp]);
    let refined = self_attention(g, &queries, &p.sub("sa"), cfg.heads);
    let q = g.repeat_batch(&g.linear(&refined, p.get("w_qp"), None), b);

    let text = g.linear(e_d, p.get("w_e_proj"), Some(p.get("b_e_proj")));
    let k_text = g.linear(&text, p.get("w_kd"), None);
    let v_text = g.linear(&text, p.get("w_vd"), None);
    let z_text = cross_attention(g, &q, &k_text, &v_text);

    let token = g.reshape(i_d, &[b, 1, cp]);
    let k_img = g.linear(&token, p.get("w_ki"), None);
    let v_img = g.linear(&token, p.get("w_vi"), None);
    let z_image = cross_attention(g, &q, &k_img, &v_img);

    let x = g.add(&z_text, &z_image);
    let ffn = p.sub("ffn");
    let h = g.layer_norm(&x, ffn.get("norm_w"), ffn.get("norm_b"), crate::blocks::LN_EPS);
    let h = g.gelu(&g.linear(&h, ffn.get("w_1"), Some(ffn.get("b_1"))));
    let h = g.linear(&h, ffn.get("w_2"), Some(ffn.get("b_2")));
    Ok(g.add(&x, &h))
}

pub fn init_prompt_encoder<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &PromptConfig) {
    init_image_encoder(&mut b.sub("image"), cfg);
    init_refiner(&mut b.sub("refine"), cfg);
}
