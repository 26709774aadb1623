//! Multiple-in-one image restoration conditioned on large-model priors.
//!
//! The crate covers the full path from prior acquisition to evaluation:
//!
//! - [`priors`]: degradation/content text, text embeddings and a synthesized
//!   reference image per input, cached on disk as prior bundles.
//! - [`blocks`]: the conditioned transformer blocks and their primitives.
//! - [`prompt`]: the query-based prompt encoder producing the refined
//!   degradation representation.
//! - [`network`]: the U-shaped restoration network, parameters and checkpoints.
//! - [`train`]: data sampling, synthetic degradations and the optimizer loop.
//! - [`eval`]: PSNR/SSIM, benchmark suites and embedding export.

pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod network;
pub mod params;
pub mod priors;
pub mod prompt;
pub mod tensor;
pub mod train;
pub mod eval;

pub use error::{Error, Result};
pub use image::TensorImage;
pub use tensor::Tensor;
