//! The conditioned U-shaped restoration network.
//!
//! Shallow 3×3 conv, encoder levels of degradation-aware blocks with
//! stride-2 downsampling, a bottleneck of content-aware blocks, and decoder
//! levels of reference-based blocks with pixel-shuffle upsampling and
//! skip fusion. The output conv predicts a residual on the input.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PadMode, Var};
use crate::blocks::{
    cat_block, dat_block, init_cat_block, init_dat_block, init_rbt_fusion, project_reference_map,
    rbt_fusion, reference_batch, BlockConfig, SoftmaxAxis,
};
use crate::error::{Error, Result};
use crate::image::TensorImage;
use crate::params::{ParamBuilder, ParamStore, Scope};
use crate::priors::{PriorBundle, PriorPipeline, TextEmbedding};
use crate::prompt::{
    encode_degraded_image, init_prompt_encoder, refine_degradation, ImageGlobalFeature, PromptConfig, RefinedDegradation,
};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
///
/// `channels_per_level` and `heads_per_level` have one entry per level.
/// The encoder and decoder block lists have one entry per non-bottleneck
/// level: the encoder list runs from the top level down, the decoder list
/// from the level just above the bottleneck up to the top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: usize,
    pub channels_per_level: Vec<usize>,
    pub blocks_per_level_encoder: Vec<usize>,
    pub bottleneck_blocks: usize,
    pub blocks_per_level_decoder: Vec<usize>,
    pub heads_per_level: Vec<usize>,
    pub c_prompt: usize,
    pub n_queries: usize,
    pub c_text: usize,
    pub prompt_heads: usize,
    pub image_encoder_channels: usize,
    pub gfn_ratio: f64,
    pub global_residual: bool,
    pub lra_softmax_axis: SoftmaxAxis,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            channels_per_level: vec![48, 96, 192, 384],
            blocks_per_level_encoder: vec![4, 6, 6],
            bottleneck_blocks: 8,
            blocks_per_level_decoder: vec![6, 6, 4],
            heads_per_level: vec![1, 2, 4, 8],
            c_prompt: 256,
            n_queries: 8,
            c_text: 768,
            prompt_heads: 8,
            image_encoder_channels: 32,
            gfn_ratio: 2.66,
            global_residual: true,
            lra_softmax_axis: SoftmaxAxis::Channel,
        }
    }
}

impl NetworkConfig {
    /// Small configuration for tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            channels_per_level: vec![16, 32, 64, 128],
            blocks_per_level_encoder: vec![1, 1, 1],
            bottleneck_blocks: 2,
            blocks_per_level_decoder: vec![1, 1, 1],
            c_prompt: 32,
            prompt_heads: 4,
            image_encoder_channels: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.levels < 1 {
            return bad("levels must be at least 1".into());
        }
        let l = self.levels;
        if self.channels_per_level.len() != l || self.heads_per_level.len() != l {
            return bad(format!(
                "channels ({}) and heads ({}) need one entry per level ({l})",
                self.channels_per_level.len(),
                self.heads_per_level.len()
            ));
        }
        if self.blocks_per_level_encoder.len() != l - 1 || self.blocks_per_level_decoder.len() != l - 1 {
            return bad(format!(
                "encoder ({}) and decoder ({}) block lists need {} entries",
                self.blocks_per_level_encoder.len(),
                self.blocks_per_level_decoder.len(),
                l - 1
            ));
        }
        if self.channels_per_level.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("channels {:?} must increase with depth", self.channels_per_level));
        }
        for (i, (&c, &h)) in self.channels_per_level.iter().zip(&self.heads_per_level).enumerate() {
            if c == 0 || h == 0 || c % h != 0 {
                return bad(format!("level {i}: {c} channels not divisible by {h} heads"));
            }
            if i + 1 < l {
                if c % 2 != 0 {
                    return bad(format!("decoder level {i} has odd channel count {c}"));
                }
                if (c / 2) % h != 0 {
                    return bad(format!("decoder level {i}: half width {} not divisible by {h} heads", c / 2));
                }
            }
        }
        if !(self.gfn_ratio > 0.0) || !self.gfn_ratio.is_finite() {
            return bad(format!("gfn_ratio {} must be positive", self.gfn_ratio));
        }
        self.prompt_config().validate()
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            c_prompt: self.c_prompt,
            n_queries: self.n_queries,
            c_text: self.c_text,
            heads: self.prompt_heads,
            image_channels: self.image_encoder_channels,
        }
    }

    pub fn block_config(&self, level: usize) -> BlockConfig {
        BlockConfig { heads: self.heads_per_level[level], gfn_ratio: self.gfn_ratio, lra_axis: self.lra_softmax_axis }
    }

    /// Spatial multiple the padded input must reach.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Decoder block count at `level` (0 is the top).
    pub fn decoder_blocks_at(&self, level: usize) -> usize {
        self.blocks_per_level_decoder[self.levels - 2 - level]
    }
}

/// Fresh parameters, rounded to `f32` precision. Deterministic in `seed`.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let ch = &config.channels_per_level;
    init_prompt_encoder(&mut b.sub("prompt"), &config.prompt_config());
    b.conv("shallow", 3, 3, ch[0]);
    for level in 0..config.levels - 1 {
        let cfg = config.block_config(level);
        for k in 0..config.blocks_per_level_encoder[level] {
            init_dat_block(&mut b.sub(format!("encoder.{level}.{k}")), ch[level], config.c_prompt, &cfg);
        }
        b.conv(&format!("down{level}"), 3, ch[level], ch[level + 1]);
    }
    let deepest = config.levels - 1;
    for k in 0..config.bottleneck_blocks {
        init_cat_block(&mut b.sub(format!("bottleneck.{k}")), ch[deepest], config.c_text, &config.block_config(deepest));
    }
    for level in (0..config.levels - 1).rev() {
        let cfg = config.block_config(level);
        let c = ch[level];
        b.conv(&format!("up{level}"), 1, ch[level + 1], 4 * c);
        b.conv(&format!("fuse{level}"), 1, 2 * c, c);
        b.sub(format!("decoder.{level}")).conv("phi", 3, 3, c);
        for k in 0..config.decoder_blocks_at(level) {
            init_rbt_fusion(&mut b.sub(format!("decoder.{level}.{k}")), c, &cfg);
        }
    }
    b.conv("output", 3, ch[0], 3);
    store.round_to_f32();
    Ok(store)
}

fn check_finite(x: &Var, stage: impl FnOnce() -> String) -> Result<()> {
    if x.value().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(stage()))
    }
}

fn conv(g: &Graph, x: &Var, p: &Scope<'_>, name: &str, k: usize, stride: usize) -> Var {
    let x = if k > 1 { g.pad(x, (k / 2, k / 2, k / 2, k / 2), PadMode::Zero) } else { x.clone() };
    g.conv2d(&x, p.get(&format!("w_{name}")), Some(p.get(&format!("b_{name}"))), stride)
}

/// `[B, H, W, 3]` image → refined degradation tokens `[B, N̂, C_p]`.
pub fn prompt_forward(g: &Graph, image: &Var, e_d: &Var, p: &Scope<'_>, config: &NetworkConfig) -> Result<Var> {
    let prompt = p.sub("prompt");
    let i_d = encode_degraded_image(g, image, &prompt.sub("image"))?;
    let z_d = refine_degradation(g, e_d, &i_d, &prompt.sub("refine"), &config.prompt_config())?;
    check_finite(&z_d, || "prompt encoder".into())?;
    Ok(z_d)
}

/// Restoration body. `image: [B, H, W, 3]`, `z_d: [B, N̂, C_p]`,
/// `e_c: [B, N, C_text]`, one reference per batch item. Returns `[B, H, W, 3]`
/// in `[0, 1]`.
pub fn forward(
    g: &Graph,
    image: &Var,
    z_d: &Var,
    e_c: &Var,
    references: &[&TensorImage],
    p: &Scope<'_>,
    config: &NetworkConfig,
) -> Result<Var> {
    let (b, h, w) = match *image.shape() {
        [b, h, w, 3] if b > 0 && h > 0 && w > 0 => (b, h, w),
        _ => return Err(Error::shape("forward", "[B, H, W, 3]", image.shape())),
    };
    if references.len() != b {
        return Err(Error::shape("forward", format!("{b} references"), references.len()));
    }
    let m = config.size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let x = g.pad(image, (0, ph - h, 0, pw - w), PadMode::Reflect);
    let ch = &config.channels_per_level;

    let mut f = conv(g, &x, p, "shallow", 3, 1);
    let mut skips = Vec::with_capacity(config.levels - 1);
    for level in 0..config.levels - 1 {
        let cfg = config.block_config(level);
        for k in 0..config.blocks_per_level_encoder[level] {
            f = dat_block(g, &f, z_d, &p.sub(format!("encoder.{level}.{k}")), &cfg)?;
            check_finite(&f, || format!("encoder level {level} block {k}"))?;
        }
        skips.push(f.clone());
        f = conv(g, &f, p, &format!("down{level}"), 3, 2);
    }
    let deepest = config.levels - 1;
    for k in 0..config.bottleneck_blocks {
        f = cat_block(g, &f, e_c, &p.sub(format!("bottleneck.{k}")), &config.block_config(deepest))?;
        check_finite(&f, || format!("bottleneck block {k}"))?;
    }
    for level in (0..config.levels - 1).rev() {
        let cfg = config.block_config(level);
        f = g.pixel_shuffle(&conv(g, &f, p, &format!("up{level}"), 1, 1), 2);
        let skip = skips.pop().expect("one skip per level");
        f = conv(g, &g.concat_last(&[&f, &skip]), p, &format!("fuse{level}"), 1, 1);
        debug_assert_eq!(f.shape()[3], ch[level]);
        let (lh, lw) = (ph >> level, pw >> level);
        let reference = g.constant(reference_batch(references, lh, lw));
        let f_ref = project_reference_map(g, &reference, &p.sub(format!("decoder.{level}")))?;
        for k in 0..config.decoder_blocks_at(level) {
            f = rbt_fusion(g, &f, &f_ref, &p.sub(format!("decoder.{level}.{k}")), &cfg)?;
            check_finite(&f, || format!("decoder level {level} block {k}"))?;
        }
    }
    let delta = conv(g, &f, p, "output", 3, 1);
    let delta = g.crop(&delta, 0, 0, h, w);
    check_finite(&delta, || "output conv".into())?;
    let y = if config.global_residual { g.add(image, &delta) } else { delta };
    Ok(g.clamp01(&y))
}

/// `[1, N, C]` from a text embedding.
pub fn embedding_tensor(e: &TextEmbedding) -> Tensor {
    let (n, c) = e.shape();
    e.to_tensor().reshape([1, n, c])
}

/// Stacks per-item `[N, C]` embeddings into `[B, N, C]`.
pub fn stack_embeddings(items: &[&TextEmbedding]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::InvalidArgument("no embeddings to stack".into()))?.shape();
    let mut data = Vec::with_capacity(items.len() * first.0 * first.1);
    for e in items {
        if e.shape() != first {
            return Err(Error::EmbeddingShapeMismatch { expected: first, got: e.shape() });
        }
        data.extend(e.data().iter().map(|&v| v as f64));
    }
    Ok(Tensor::new([items.len(), first.0, first.1], data))
}

/// Full model on one graph: prompt encoder then restoration body.
pub fn model_forward(
    g: &Graph,
    image: &Var,
    e_d: &Var,
    e_c: &Var,
    references: &[&TensorImage],
    p: &Scope<'_>,
    config: &NetworkConfig,
) -> Result<Var> {
    let z_d = prompt_forward(g, image, e_d, p, config)?;
    forward(g, image, &z_d, e_c, references, p, config)
}

/// A configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

impl Network {
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Inference without gradient recording.
    pub fn restore(&self, image: &TensorImage, bundle: &PriorBundle) -> Result<TensorImage> {
        restore(image, bundle, &self.params, &self.config)
    }

    /// Refined degradation tokens `[N̂, C_p]` for one image.
    pub fn refined_degradation(&self, image: &TensorImage, e_d: &TextEmbedding) -> Result<Tensor> {
        let g = Graph::inference();
        let bound = self.params.bind_frozen(&g);
        let x = g.constant(image.to_tensor());
        let e = g.constant(embedding_tensor(e_d));
        let z = prompt_forward(&g, &x, &e, &bound.scope(), &self.config)?;
        let (n, c) = (z.shape()[1], z.shape()[2]);
        Ok(z.value().clone().reshape([n, c]))
    }

    /// Global image feature `I_d` and refined tokens `Z_d` for one image.
    pub fn prompt_features(
        &self,
        image: &TensorImage,
        e_d: &TextEmbedding,
    ) -> Result<(ImageGlobalFeature, RefinedDegradation)> {
        let g = Graph::inference();
        let bound = self.params.bind_frozen(&g);
        let prompt = bound.scope().sub("prompt");
        let x = g.constant(image.to_tensor());
        let e = g.constant(embedding_tensor(e_d));
        let i_d = encode_degraded_image(&g, &x, &prompt.sub("image"))?;
        let z = refine_degradation(&g, &e, &i_d, &prompt.sub("refine"), &self.config.prompt_config())?;
        let (n, c) = (z.shape()[1], z.shape()[2]);
        Ok((ImageGlobalFeature(i_d.value().data().to_vec()), RefinedDegradation(z.value().clone().reshape([n, c]))))
    }
}

/// Prompt encoder plus restoration body on a single image.
pub fn restore(
    image: &TensorImage,
    bundle: &PriorBundle,
    params: &ParamStore,
    config: &NetworkConfig,
) -> Result<TensorImage> {
    for e in [&bundle.e_d, &bundle.e_c] {
        if e.shape().1 != config.c_text {
            return Err(Error::EmbeddingShapeMismatch { expected: (e.shape().0, config.c_text), got: e.shape() });
        }
    }
    let g = Graph::inference();
    let bound = params.bind_frozen(&g);
    let x = g.constant(image.to_tensor());
    let e_d = g.constant(embedding_tensor(&bundle.e_d));
    let e_c = g.constant(embedding_tensor(&bundle.e_c));
    let y = model_forward(&g, &x, &e_d, &e_c, &[&bundle.reference], &bound.scope(), config)?;
    TensorImage::from_tensor(y.value())
}

/// Restoration driven by a user instruction: the instruction's embedding
/// replaces the bundle's degradation embedding while the content embedding
/// and reference image are kept.
pub fn guided_restore(
    network: &Network,
    image: &TensorImage,
    instruction: &str,
    bundle: &PriorBundle,
    pipeline: &PriorPipeline,
) -> Result<TensorImage> {
    if instruction.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let e_d = pipeline.encode_text(instruction)?;
    let guided = PriorBundle { e_d, ..bundle.clone() };
    network.restore(image, &guided)
}
