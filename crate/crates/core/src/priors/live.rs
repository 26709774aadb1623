//! JSON-over-HTTP provider clients.
//!
//! Wire formats:
//! - MLLM: OpenAI-style chat completion with one text part and one
//!   `data:image/png;base64` part; reply text at `choices[0].message.content`.
//! - Text encoder: `{"model", "input"}` → `{"embedding": [[f32; C]; N]}`.
//! - Diffusion: [`DiffusionRequest`] as JSON → `{"image": "<base64 png>"}`.
//! - Image encoder: `{"image": "<base64 png>"}` → `{"embedding": [f64]}`.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use super::{
    DiffusionProvider, DiffusionRequest, ImageEncoderProvider, MllmProvider, PromptKind,
    RetryPolicy, TextEncoderProvider,
};
use crate::error::{Error, Result};
use crate::image::TensorImage;

/// Longest side of images sent to the MLLM.
pub const MLLM_MAX_SIDE: usize = 512;

#[derive(Clone, Debug)]
struct Client {
    agent: ureq::Agent,
    endpoint: String,
    retry: RetryPolicy,
}

impl Client {
    fn new(endpoint: &str, retry: &RetryPolicy, timeout_ms: u64) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, endpoint: endpoint.to_string(), retry: retry.clone() }
    }

    fn post(&self, body: &Value) -> Result<Value> {
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                let wait = self.retry.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.agent.post(&self.endpoint).send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status >= 500 || status == 429 {
                        last = format!("{} returned HTTP {status}", self.endpoint);
                        continue;
                    }
                    if status >= 400 {
                        return Err(Error::ProviderUnavailable(format!(
                            "{} returned HTTP {status}",
                            self.endpoint
                        )));
                    }
                    return resp
                        .body_mut()
                        .read_json::<Value>()
                        .map_err(|e| Error::MalformedResponse(format!("{}: {e}", self.endpoint)));
                }
                Err(e) => last = format!("{}: {e}", self.endpoint),
            }
            log::warn!("provider attempt {} failed: {last}", attempt + 1);
        }
        Err(Error::ProviderUnavailable(format!(
            "{last} (after {} attempts)",
            self.retry.max_attempts
        )))
    }
}

fn png_base64(image: &TensorImage) -> Result<String> {
    Ok(B64.encode(image.to_png_bytes()?))
}

fn decode_png_base64(s: &str) -> Result<TensorImage> {
    let bytes = B64.decode(s).map_err(|e| Error::MalformedResponse(format!("image base64: {e}")))?;
    TensorImage::decode(&bytes).map_err(|e| Error::MalformedResponse(format!("image payload: {e}")))
}

fn limit_side(image: &TensorImage, max_side: usize) -> TensorImage {
    let (h, w) = (image.height(), image.width());
    let longest = h.max(w);
    if longest <= max_side {
        return image.clone();
    }
    let scale = max_side as f64 / longest as f64;
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    image.resize_bilinear(nh, nw)
}

#[derive(Clone, Debug)]
pub struct HttpMllm {
    client: Client,
    model: String,
}

impl HttpMllm {
    pub fn new(endpoint: &str, model: &str, retry: &RetryPolicy, timeout_ms: u64) -> Self {
        Self { client: Client::new(endpoint, retry, timeout_ms), model: model.to_string() }
    }
}

impl MllmProvider for HttpMllm {
    fn id(&self) -> String {
        format!("http-mllm:{}", self.model)
    }

    fn describe(&self, image: &TensorImage, _image_id: &str, kind: PromptKind) -> Result<String> {
        let data = png_base64(&limit_side(image, MLLM_MAX_SIDE))?;
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": kind.template()},
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{data}")}}
                ]
            }]
        });
        let reply = self.client.post(&body)?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::MalformedResponse("missing choices[0].message.content".into()))?;
        Ok(text.trim().to_string())
    }
}

#[derive(Clone, Debug)]
pub struct HttpTextEncoder {
    client: Client,
    tokens: usize,
    width: usize,
}

impl HttpTextEncoder {
    pub fn new(endpoint: &str, shape: (usize, usize), retry: &RetryPolicy, timeout_ms: u64) -> Self {
        Self { client: Client::new(endpoint, retry, timeout_ms), tokens: shape.0, width: shape.1 }
    }
}

impl TextEncoderProvider for HttpTextEncoder {
    fn id(&self) -> String {
        format!("http-clip-{}x{}", self.tokens, self.width)
    }

    fn shape(&self) -> (usize, usize) {
        (self.tokens, self.width)
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let reply = self.client.post(&json!({"model": "clip", "input": text}))?;
        let rows = reply
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::MalformedResponse("missing embedding array".into()))?;
        let mut out = Vec::with_capacity(self.tokens * self.width);
        let mut width = 0;
        for row in rows {
            let row = row
                .as_array()
                .ok_or_else(|| Error::MalformedResponse("embedding rows must be arrays".into()))?;
            width = row.len();
            for v in row {
                let v = v
                    .as_f64()
                    .ok_or_else(|| Error::MalformedResponse("embedding values must be numbers".into()))?;
                out.push(v as f32);
            }
        }
        if rows.len() != self.tokens || width != self.width || out.len() != self.tokens * self.width {
            return Err(Error::EmbeddingShapeMismatch {
                expected: (self.tokens, self.width),
                got: (rows.len(), width),
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct HttpDiffusion {
    client: Client,
}

impl HttpDiffusion {
    pub fn new(endpoint: &str, retry: &RetryPolicy, timeout_ms: u64) -> Self {
        Self { client: Client::new(endpoint, retry, timeout_ms) }
    }
}

impl DiffusionProvider for HttpDiffusion {
    fn id(&self) -> String {
        format!("http-diffusion:{}", self.client.endpoint)
    }

    fn generate(&self, request: &DiffusionRequest) -> Result<TensorImage> {
        let reply = self.client.post(&serde_json::to_value(request)?)?;
        let data = reply
            .get("image")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::MalformedResponse("missing image field".into()))?;
        decode_png_base64(data)
    }
}

#[derive(Clone, Debug)]
pub struct HttpImageEncoder {
    client: Client,
}

impl HttpImageEncoder {
    pub fn new(endpoint: &str, retry: &RetryPolicy, timeout_ms: u64) -> Self {
        Self { client: Client::new(endpoint, retry, timeout_ms) }
    }
}

impl ImageEncoderProvider for HttpImageEncoder {
    fn id(&self) -> String {
        format!("http-image-encoder:{}", self.client.endpoint)
    }

    fn embed(&self, image: &TensorImage) -> Result<Vec<f64>> {
        let reply = self.client.post(&json!({"image": png_base64(image)?}))?;
        reply
            .get("embedding")
            .and_then(Value::as_array)
            .and_then(|v| v.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| Error::MalformedResponse("missing numeric embedding".into()))
    }
}
