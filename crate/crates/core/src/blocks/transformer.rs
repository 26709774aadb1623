use rand::Rng;

use super::attention::{channel_attention, init_channel_attention, tsa};
use super::dea::{dea, init_dea, ModulationParams};
use super::gfn::{gfn, init_gfn};
use super::reference::{
    init_lra, init_reference_attention, init_text_projection, lra, project_reference_map,
    reference_attention, text_projection,
};
use super::{feature_dims, BlockConfig, LN_EPS};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, Scope};

fn norm(g: &Graph, x: &Var, p: &Scope<'_>, name: &str) -> Var {
    g.layer_norm(x, p.get(&format!("{name}_w")), p.get(&format!("{name}_b")), LN_EPS)
}

pub fn init_dat_block<R: Rng>(
    b: &mut ParamBuilder<'_, R>,
    c: usize,
    c_prompt: usize,
    cfg: &BlockConfig,
) {
    b.layer_norm("norm1", c);
    init_channel_attention(&mut b.sub("tsa"), c, cfg.heads);
    b.layer_norm("norm2", c);
    init_gfn(&mut b.sub("gfn"), c, cfg.gfn_ratio);
    init_dea(&mut b.sub("dea"), c_prompt, c);
}

/// Applies a [`ModulationParams`] set to the two residual branches:
/// `F~ = G_A ⊙ TSA(γ_a ⊙ LN(F) + β_a) + F`, then
/// `F^ = G_F ⊙ GFN(γ_f ⊙ LN(F~) + β_f) + F~`.
pub fn modulated_block(
    g: &Graph,
    x: &Var,
    m: &ModulationParams,
    p: &Scope<'_>,
    cfg: &BlockConfig,
) -> Result<Var> {
    let n1 = norm(g, x, p, "norm1");
    let n1 = g.add_bc(&g.mul_bc(&n1, &m.scale_attn), &m.shift_attn);
    let attn = tsa(g, &n1, &p.sub("tsa"), cfg.heads)?;
    let x = g.add(&g.mul_bc(&attn, &m.gate_attn), x);
    let n2 = norm(g, &x, p, "norm2");
    let n2 = g.add_bc(&g.mul_bc(&n2, &m.scale_ffn), &m.shift_ffn);
    let ffn = gfn(g, &n2, &p.sub("gfn"))?;
    Ok(g.add(&g.mul_bc(&ffn, &m.gate_ffn), &x))
}

/// Degradation-aware block. `z_d: [B, N, C_p]`.
pub fn dat_block(g: &Graph, x: &Var, z_d: &Var, p: &Scope<'_>, cfg: &BlockConfig) -> Result<Var> {
    let (b, ..) = feature_dims("dat_block", x)?;
    if z_d.shape().first() != Some(&b) {
        return Err(Error::shape("dat_block", format!("Z_d batch {b}"), z_d.shape()));
    }
    let m = dea(g, z_d, &p.sub("dea"))?;
    modulated_block(g, x, &m, p, cfg)
}

/// The same block without any conditioning:
/// `F~ = TSA(LN(F)) + F`, `F^ = GFN(LN(F~)) + F~`.
pub fn unconditioned_block(g: &Graph, x: &Var, p: &Scope<'_>, cfg: &BlockConfig) -> Result<Var> {
    feature_dims("unconditioned_block", x)?;
    let attn = tsa(g, &norm(g, x, p, "norm1"), &p.sub("tsa"), cfg.heads)?;
    let x = g.add(&attn, x);
    let ffn = gfn(g, &norm(g, &x, p, "norm2"), &p.sub("gfn"))?;
    Ok(g.add(&ffn, &x))
}

pub fn init_cat_block<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize, c_text: usize, cfg: &BlockConfig) {
    b.layer_norm("norm1", c);
    init_channel_attention(&mut b.sub("tsa"), c, cfg.heads);
    init_text_projection(&mut b.sub("text"), c_text, c);
    init_reference_attention(&mut b.sub("ra"), c);
    b.layer_norm("norm2", c);
    init_gfn(&mut b.sub("gfn"), c, cfg.gfn_ratio);
}

/// Content-aware block. `e_c: [B, N, C_text]`.
///
/// `F~ = TSA(LN(F)) + F`, `F^ = RA(F~, MLP(e_c)) + F~`, output `GFN(LN(F^))`
/// with no residual around the feed-forward branch.
pub fn cat_block(g: &Graph, x: &Var, e_c: &Var, p: &Scope<'_>, cfg: &BlockConfig) -> Result<Var> {
    feature_dims("cat_block", x)?;
    let attn = tsa(g, &norm(g, x, p, "norm1"), &p.sub("tsa"), cfg.heads)?;
    let x = g.add(&attn, x);
    let tokens = text_projection(g, e_c, &p.sub("text"))?;
    let ra = reference_attention(g, &x, &tokens, &p.sub("ra"))?.out;
    let x = g.add(&ra, &x);
    gfn(g, &norm(g, &x, p, "norm2"), &p.sub("gfn"))
}

pub fn init_rbt_block<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize, cfg: &BlockConfig) {
    b.conv("phi", 3, 3, c);
    init_rbt_fusion(b, c, cfg);
}

/// Parameters of [`rbt_fusion`]: everything in the reference block but `φ`.
pub fn init_rbt_fusion<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize, cfg: &BlockConfig) {
    b.layer_norm("norm1", c);
    init_channel_attention(&mut b.sub("tsa"), c, cfg.heads);
    init_lra(&mut b.sub("lra"), c / 2);
    init_channel_attention(&mut b.sub("gra"), c / 2, cfg.heads);
    b.linear("theta", c, c);
    b.layer_norm("norm2", c);
    init_gfn(&mut b.sub("gfn"), c, cfg.gfn_ratio);
}

/// Reference-based block. `reference: [B, H, W, 3]` at the feature resolution.
///
/// `F_ref = φ(I_r)`, `F~ = TSA(LN(F)) + F`, channel split of `F~` and `F_ref`
/// into halves, `F^ = Θ([LRA(F~_l, F_ref_l), GRA(F~_g, F_ref_g)]) + F~`,
/// output `GFN(LN(F^)) + F^`.
pub fn rbt_block(g: &Graph, x: &Var, reference: &Var, p: &Scope<'_>, cfg: &BlockConfig) -> Result<Var> {
    let (b, h, w, c) = feature_dims("rbt_block", x)?;
    if c % 2 != 0 {
        return Err(Error::OddChannelCount(c));
    }
    match *reference.shape() {
        [rb, rh, rw, 3] if rb == b && rh == h && rw == w => {}
        _ => return Err(Error::shape("rbt_block", format!("[{b}, {h}, {w}, 3]"), reference.shape())),
    }
    let f_ref = project_reference_map(g, reference, p)?;
    rbt_fusion(g, x, &f_ref, p, cfg)
}

/// The reference block after `φ`: `f_ref: [B, H, W, C]` is the already
/// projected reference.
pub fn rbt_fusion(g: &Graph, x: &Var, f_ref: &Var, p: &Scope<'_>, cfg: &BlockConfig) -> Result<Var> {
    let (b, h, w, c) = feature_dims("rbt_block", x)?;
    if c % 2 != 0 {
        return Err(Error::OddChannelCount(c));
    }
    if f_ref.shape() != x.shape() {
        return Err(Error::shape("rbt_block", format!("[{b}, {h}, {w}, {c}]"), f_ref.shape()));
    }
    let attn = tsa(g, &norm(g, x, p, "norm1"), &p.sub("tsa"), cfg.heads)?;
    let x = g.add(&attn, x);
    let half = c / 2;
    let (x_l, x_g) = (g.slice_last(&x, 0, half), g.slice_last(&x, half, half));
    let (r_l, r_g) = (g.slice_last(f_ref, 0, half), g.slice_last(f_ref, half, half));
    let local = lra(g, &x_l, &r_l, &p.sub("lra"), cfg.lra_axis)?.out;
    let global = channel_attention(g, &x_g, &r_g, &p.sub("gra"), cfg.heads)?.out;
    let fused = g.linear(&g.concat_last(&[&local, &global]), p.get("w_theta"), Some(p.get("b_theta")));
    let x = g.add(&fused, &x);
    let ffn = gfn(g, &norm(g, &x, p, "norm2"), &p.sub("gfn"))?;
    Ok(g.add(&ffn, &x))
}
