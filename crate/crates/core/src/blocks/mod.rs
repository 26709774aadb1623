//! Conditioned transformer blocks and their primitives.
//!
//! Feature maps are channels-last `[B, H, W, C]` graph values. Every block is
//! a pure function of its inputs and a parameter [`Scope`](crate::params::Scope).
//!
//! - [`dat_block`]: degradation-aware block, modulated by [`dea`] outputs.
//! - [`cat_block`]: content-aware block, attends to projected text tokens.
//! - [`rbt_block`]: reference-based block, fuses local and global attention
//!   over features of the synthesized reference image.

mod attention;
mod dea;
mod gfn;
mod reference;
mod transformer;

pub use attention::{channel_attention, gra, init_channel_attention, tsa, AttentionOutput};
pub use dea::{dea, init_dea, ModulationParams};
pub use gfn::{gfn, gfn_hidden, init_gfn};
pub use reference::{
    init_lra, init_reference_attention, init_text_projection, lra, project_reference,
    project_reference_map, reference_attention, reference_batch, text_projection,
};
pub use transformer::{
    cat_block, dat_block, init_cat_block, init_dat_block, init_rbt_block, init_rbt_fusion,
    modulated_block, rbt_block, rbt_fusion, unconditioned_block,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Softmax axis for the local reference attention similarity map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Per pixel, across channels.
    #[default]
    Channel,
    /// Per channel, across spatial positions.
    Spatial,
}

/// Per-level hyperparameters shared by the blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub heads: usize,
    pub gfn_ratio: f64,
    pub lra_axis: SoftmaxAxis,
}

impl BlockConfig {
    pub fn new(heads: usize) -> Self {
        Self { heads, gfn_ratio: 2.66, lra_axis: SoftmaxAxis::Channel }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Validates a `[B, H, W, C]` map and returns its dims.
pub(crate) fn feature_dims(op: &'static str, x: &Var) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, h, w, c] if b > 0 && h > 0 && w > 0 && c > 0 => Ok((b, h, w, c)),
        _ => Err(Error::shape(op, "[B, H, W, C]", x.shape())),
    }
}

pub(crate) fn expect_channels(op: &'static str, x: &Var, c: usize) -> Result<()> {
    let got = *x.shape().last().unwrap_or(&0);
    if got != c {
        return Err(Error::shape(op, format!("{c} channels"), x.shape()));
    }
    Ok(())
}
