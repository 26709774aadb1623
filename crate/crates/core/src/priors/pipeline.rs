use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use chrono::{DateTime, Utc};

use super::store::BundleStore;
use super::{
    text_hash, DiffusionMeta, DiffusionProvider, DiffusionRequest, FixtureDiffusion, FixtureMllm,
    FixtureTable, FixtureTextEncoder, HttpDiffusion, HttpMllm, HttpTextEncoder, MllmProvider,
    PriorBundle, PriorTexts, PromptKind, ProviderConfig, TextEmbedding, TextEncoderProvider, FIXTURE,
    PROMPT_TEMPLATE_ID, TEXT_TOKENS, TEXT_WIDTH,
};
use crate::error::Result;
use crate::image::TensorImage;

/// Source of bundle timestamps.
pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

/// Counting semaphore around provider calls.
#[derive(Debug)]
pub struct RequestLimiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl RequestLimiter {
    pub fn new(max: usize) -> Self {
        Self { max: max.max(1), in_flight: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
            while *n >= self.max {
                n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
            }
            *n += 1;
        }
        struct Release<'a>(&'a RequestLimiter);
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
                *n -= 1;
                self.0.freed.notify_one();
            }
        }
        let _release = Release(self);
        f()
    }
}

/// MLLM → text encoder ×2 → diffusion, with an optional on-disk cache.
#[derive(Clone)]
pub struct PriorPipeline {
    config: ProviderConfig,
    mllm: Arc<dyn MllmProvider>,
    encoder: Arc<dyn TextEncoderProvider>,
    diffusion: Arc<dyn DiffusionProvider>,
    limiter: Arc<RequestLimiter>,
    store: Option<BundleStore>,
    clock: Clock,
}

impl PriorPipeline {
    /// Builds fixture or HTTP providers according to the endpoints.
    pub fn from_config(config: ProviderConfig) -> Result<Self> {
        config.validate()?;
        let (retry, timeout) = (&config.retry, config.request_timeout_ms);
        let mllm: Arc<dyn MllmProvider> = if config.mllm_endpoint == FIXTURE {
            let table = match &config.fixture_table {
                Some(path) => FixtureTable::load(path)?,
                None => FixtureTable::default(),
            };
            Arc::new(FixtureMllm::new(table))
        } else {
            Arc::new(HttpMllm::new(&config.mllm_endpoint, &config.mllm_model, retry, timeout))
        };
        let encoder: Arc<dyn TextEncoderProvider> = if config.text_encoder_endpoint == FIXTURE {
            Arc::new(FixtureTextEncoder::default())
        } else {
            Arc::new(HttpTextEncoder::new(
                &config.text_encoder_endpoint,
                (TEXT_TOKENS, TEXT_WIDTH),
                retry,
                timeout,
            ))
        };
        let diffusion: Arc<dyn DiffusionProvider> = if config.diffusion_endpoint == FIXTURE {
            Arc::new(FixtureDiffusion)
        } else {
            Arc::new(HttpDiffusion::new(&config.diffusion_endpoint, retry, timeout))
        };
        Self::with_providers(config, mllm, encoder, diffusion)
    }

    pub fn with_providers(
        config: ProviderConfig,
        mllm: Arc<dyn MllmProvider>,
        encoder: Arc<dyn TextEncoderProvider>,
        diffusion: Arc<dyn DiffusionProvider>,
    ) -> Result<Self> {
        config.validate()?;
        let limiter = Arc::new(RequestLimiter::new(config.max_parallel_requests));
        Ok(Self { config, mllm, encoder, diffusion, limiter, store: None, clock: Arc::new(Utc::now) })
    }

    pub fn with_cache(mut self, root: impl Into<PathBuf>) -> Self {
        self.store = Some(BundleStore::new(root));
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn store(&self) -> Option<&BundleStore> {
        self.store.as_ref()
    }

    pub fn text_shape(&self) -> (usize, usize) {
        self.encoder.shape()
    }

    /// `mllm;encoder;diffusion` provider ids.
    pub fn provider_id(&self) -> String {
        format!("{};{};{}", self.mllm.id(), self.encoder.id(), self.diffusion.id())
    }

    pub fn query_mllm(&self, image: &TensorImage) -> Result<PriorTexts> {
        let image_id = image.content_id();
        let degradation_text =
            self.limiter.run(|| self.mllm.describe(image, &image_id, PromptKind::Degradation))?;
        let content_text = self.limiter.run(|| self.mllm.describe(image, &image_id, PromptKind::Content))?;
        let texts = PriorTexts {
            degradation_text,
            content_text,
            provider_id: self.provider_id(),
            prompt_template_id: PROMPT_TEMPLATE_ID.into(),
        };
        if self.config.mllm_endpoint == FIXTURE {
            texts.validate_fixture()?;
        } else {
            texts.validate()?;
        }
        Ok(texts)
    }

    pub fn encode_text(&self, text: &str) -> Result<TextEmbedding> {
        if text.trim().is_empty() {
            return Err(crate::Error::EmptyText);
        }
        let data = self.limiter.run(|| self.encoder.encode(text))?;
        let (n, c) = self.encoder.shape();
        TextEmbedding::new(n, c, data, text_hash(text), self.encoder.id())
    }

    /// Content text as the prompt, degradation text as the negative prompt.
    pub fn synthesize_reference(&self, texts: &PriorTexts, seed: u64) -> Result<(TensorImage, DiffusionMeta)> {
        texts.validate()?;
        let request = DiffusionRequest {
            prompt: texts.content_text.clone(),
            negative_prompt: texts.degradation_text.clone(),
            steps: self.config.diffusion_steps,
            seed,
            width: self.config.reference_size,
            height: self.config.reference_size,
        };
        let image = self.limiter.run(|| self.diffusion.generate(&request))?;
        if image.is_constant() {
            log::warn!("reference for '{}' is constant-valued", texts.content_text);
        }
        let meta = DiffusionMeta { steps: request.steps, seed, negative_prompt: request.negative_prompt };
        Ok((image, meta))
    }

    fn compute(&self, image: &TensorImage, image_id: String, seed: u64) -> Result<PriorBundle> {
        let texts = self.query_mllm(image)?;
        let e_d = self.encode_text(&texts.degradation_text)?;
        let e_c = self.encode_text(&texts.content_text)?;
        let (reference, diffusion_meta) = self.synthesize_reference(&texts, seed)?;
        Ok(PriorBundle {
            image_id,
            texts,
            e_d,
            e_c,
            // the stored form is 8-bit PNG
            reference: reference.quantized(),
            diffusion_meta,
            created_at: (self.clock)(),
        })
    }

    /// Returns the cached bundle for this image when present; otherwise
    /// queries the providers and (with a cache) persists the result.
    pub fn build_bundle(&self, image: &TensorImage, seed: u64) -> Result<PriorBundle> {
        let image_id = image.content_id();
        let Some(store) = &self.store else {
            return self.compute(image, image_id, seed);
        };
        let lock = store.lock_file(&image_id)?;
        lock.lock().map_err(crate::Error::io(store.root()))?;
        if store.contains(&image_id) {
            return store.load_locked(&image_id);
        }
        let bundle = self.compute(image, image_id, seed)?;
        store.save_locked(&bundle)?;
        Ok(bundle)
    }

    /// Builds bundles on up to `max_parallel_requests` threads; results keep
    /// the input order.
    pub fn build_bundles(&self, images: &[TensorImage], seed: u64) -> Vec<Result<PriorBundle>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<PriorBundle>>>> = images.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.config.max_parallel_requests.min(images.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= images.len() {
                        break;
                    }
                    let r = self.build_bundle(&images[i], seed);
                    *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot is filled"))
            .collect()
    }
}
