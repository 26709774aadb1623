//! Large-model priors: degradation text, content text, their token
//! embeddings and a synthesized reference image, cached per input image.
//!
//! Providers come in two flavors behind the same traits: deterministic
//! fixtures (the default, used by tests and desk-scale runs) and HTTP
//! clients for live endpoints.

mod fixture;
mod live;
mod pipeline;
mod similarity;
mod store;

pub use fixture::{FixtureDiffusion, FixtureImageEncoder, FixtureMllm, FixtureTable, FixtureTextEncoder};
pub use live::{HttpDiffusion, HttpImageEncoder, HttpMllm, HttpTextEncoder};
pub use pipeline::{Clock, PriorPipeline, RequestLimiter};
pub use similarity::{cosine_similarity, reference_similarity_report};
pub use store::{bundle_dir, load_bundle, save_bundle, BundleStore, Manifest, TensorEntry};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::TensorImage;
use crate::tensor::Tensor;

/// Default token count of the text encoder.
pub const TEXT_TOKENS: usize = 77;
/// Default width of the text encoder.
pub const TEXT_WIDTH: usize = 768;
/// Native side length of synthesized references.
pub const REFERENCE_SIZE: usize = 1024;

/// Version tag of the two prompt templates below.
pub const PROMPT_TEMPLATE_ID: &str = "lmdir-prompts-v1";

pub const DEGRADATION_TEMPLATE: &str = "List only the degradations visible in this image (e.g., noise, rain streaks, low light, haze, blur). Do not describe the scene.";
pub const CONTENT_TEMPLATE: &str = "Describe the scene content of this image in one or two sentences. Ignore any degradation.";

/// Words that mark degradation descriptions. Fixture content texts must
/// not contain any of them.
pub const DEGRADATION_KEYWORDS: &[&str] =
    &["noise", "noisy", "rain", "streak", "low light", "dark", "underexposed", "haze", "blur", "grain"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Degradation,
    Content,
}

impl PromptKind {
    pub fn template(self) -> &'static str {
        match self {
            PromptKind::Degradation => DEGRADATION_TEMPLATE,
            PromptKind::Content => CONTENT_TEMPLATE,
        }
    }
}

/// Lowercase SHA-256 hex digest of UTF-8 text.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorTexts {
    pub degradation_text: String,
    pub content_text: String,
    pub provider_id: String,
    pub prompt_template_id: String,
}

impl PriorTexts {
    pub fn validate(&self) -> Result<()> {
        if self.degradation_text.trim().is_empty() {
            return Err(Error::MalformedResponse("empty degradation description".into()));
        }
        if self.content_text.trim().is_empty() {
            return Err(Error::MalformedResponse("empty content description".into()));
        }
        Ok(())
    }

    /// Fixture-only separation check: the content text carries no
    /// degradation vocabulary and the two texts differ.
    pub fn validate_fixture(&self) -> Result<()> {
        self.validate()?;
        let content = self.content_text.to_lowercase();
        if let Some(k) = DEGRADATION_KEYWORDS.iter().find(|k| content.contains(*k)) {
            return Err(Error::MalformedResponse(format!("content text mentions degradation '{k}'")));
        }
        if self.degradation_text == self.content_text {
            return Err(Error::MalformedResponse("degradation and content texts are identical".into()));
        }
        Ok(())
    }
}

/// Token embeddings `[N, C]` of one text.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    tokens: usize,
    width: usize,
    data: Vec<f32>,
    pub source_text_hash: String,
    pub encoder_id: String,
}

impl TextEmbedding {
    pub fn new(
        tokens: usize,
        width: usize,
        data: Vec<f32>,
        source_text_hash: String,
        encoder_id: String,
    ) -> Result<Self> {
        if data.len() != tokens * width {
            return Err(Error::EmbeddingShapeMismatch {
                expected: (tokens, width),
                got: (data.len() / width.max(1), width),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedResponse("embedding contains non-finite values".into()));
        }
        Ok(Self { tokens, width, data, source_text_hash, encoder_id })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.tokens, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `[N, C]` in `f64`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32([self.tokens, self.width], &self.data)
    }

    /// Token mean, `[C]`.
    pub fn pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        for row in self.data.chunks_exact(self.width) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v as f64;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.tokens as f64);
        out
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffusionMeta {
    pub steps: u32,
    pub seed: u64,
    pub negative_prompt: String,
}

/// Non-fatal findings attached to a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BundleWarning {
    /// The synthesized reference is constant-valued.
    DegenerateReference,
}

/// All priors for one input image.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorBundle {
    pub image_id: String,
    pub texts: PriorTexts,
    pub e_d: TextEmbedding,
    pub e_c: TextEmbedding,
    pub reference: TensorImage,
    pub diffusion_meta: DiffusionMeta,
    pub created_at: DateTime<Utc>,
}

impl PriorBundle {
    pub fn warnings(&self) -> Vec<BundleWarning> {
        let mut w = Vec::new();
        if self.reference.is_constant() {
            w.push(BundleWarning::DegenerateReference);
        }
        w
    }

    pub fn has_degenerate_reference(&self) -> bool {
        self.warnings().contains(&BundleWarning::DegenerateReference)
    }

    /// Checks the hash links between texts and embeddings.
    pub fn verify(&self) -> Result<()> {
        self.texts.validate()?;
        let corrupt = |reason: &str| Error::CacheCorrupt {
            image_id: self.image_id.clone(),
            reason: reason.to_string(),
        };
        if self.e_d.source_text_hash != text_hash(&self.texts.degradation_text) {
            return Err(corrupt("e_d does not belong to the degradation text"));
        }
        if self.e_c.source_text_hash != text_hash(&self.texts.content_text) {
            return Err(corrupt("e_c does not belong to the content text"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_base_ms: 200 }
    }
}

/// Endpoint is either the literal `"fixture"` or an HTTP(S) URL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub mllm_endpoint: String,
    pub text_encoder_endpoint: String,
    pub diffusion_endpoint: String,
    pub image_encoder_endpoint: String,
    pub mllm_model: String,
    pub max_parallel_requests: usize,
    pub retry: RetryPolicy,
    pub diffusion_steps: u32,
    pub reference_size: usize,
    /// JSON file mapping image ids to fixture texts.
    pub fixture_table: Option<std::path::PathBuf>,
    pub request_timeout_ms: u64,
}

pub const FIXTURE: &str = "fixture";

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            mllm_endpoint: FIXTURE.into(),
            text_encoder_endpoint: FIXTURE.into(),
            diffusion_endpoint: FIXTURE.into(),
            image_encoder_endpoint: FIXTURE.into(),
            mllm_model: "gpt-4o".into(),
            max_parallel_requests: 4,
            retry: RetryPolicy::default(),
            diffusion_steps: 30,
            reference_size: REFERENCE_SIZE,
            fixture_table: None,
            request_timeout_ms: 60_000,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_parallel_requests < 1 {
            return Err(Error::InvalidConfig("max_parallel_requests must be at least 1".into()));
        }
        if self.diffusion_steps < 1 {
            return Err(Error::InvalidConfig("diffusion_steps must be at least 1".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(Error::InvalidConfig("retry.max_attempts must be at least 1".into()));
        }
        if self.reference_size < 1 {
            return Err(Error::InvalidConfig("reference_size must be positive".into()));
        }
        Ok(())
    }

    pub fn all_fixture(&self) -> bool {
        [&self.mllm_endpoint, &self.text_encoder_endpoint, &self.diffusion_endpoint]
            .iter()
            .all(|e| e.as_str() == FIXTURE)
    }
}

/// Multimodal model returning text for an image and a prompt template.
pub trait MllmProvider: Send + Sync {
    fn id(&self) -> String;
    fn describe(&self, image: &TensorImage, image_id: &str, kind: PromptKind) -> Result<String>;
}

pub trait TextEncoderProvider: Send + Sync {
    fn id(&self) -> String;
    /// Fixed `(N, C)` of this encoder.
    fn shape(&self) -> (usize, usize);
    /// Row-major `N·C` values.
    fn encode(&self, text: &str) -> Result<Vec<f32>>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffusionRequest {
    pub prompt: String,
    pub negative_prompt: String,
    pub steps: u32,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
}

pub trait DiffusionProvider: Send + Sync {
    fn id(&self) -> String;
    fn generate(&self, request: &DiffusionRequest) -> Result<TensorImage>;
}

/// Image embedding model for the reference similarity diagnostic.
pub trait ImageEncoderProvider: Send + Sync {
    fn id(&self) -> String;
    fn embed(&self, image: &TensorImage) -> Result<Vec<f64>>;
}
