use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    text_hash, DiffusionProvider, DiffusionRequest, ImageEncoderProvider, MllmProvider, PromptKind,
    TextEncoderProvider, TEXT_TOKENS, TEXT_WIDTH,
};
use crate::error::{Error, Result};
use crate::image::TensorImage;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub degradation_text: String,
    pub content_text: String,
}

/// Image id → recorded texts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureTable(pub BTreeMap<String, FixtureEntry>);

impl FixtureTable {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn insert(&mut self, image_id: impl Into<String>, degradation: &str, content: &str) {
        self.0.insert(
            image_id.into(),
            FixtureEntry { degradation_text: degradation.into(), content_text: content.into() },
        );
    }
}

/// Table lookup, falling back to a heuristic image analysis for ids that
/// have no recorded entry.
#[derive(Clone, Debug, Default)]
pub struct FixtureMllm {
    pub table: FixtureTable,
}

impl FixtureMllm {
    pub fn new(table: FixtureTable) -> Self {
        Self { table }
    }
}

impl MllmProvider for FixtureMllm {
    fn id(&self) -> String {
        "fixture-mllm-v1".into()
    }

    fn describe(&self, image: &TensorImage, image_id: &str, kind: PromptKind) -> Result<String> {
        if let Some(entry) = self.table.0.get(image_id) {
            return Ok(match kind {
                PromptKind::Degradation => entry.degradation_text.clone(),
                PromptKind::Content => entry.content_text.clone(),
            });
        }
        let stats = ImageStats::of(image);
        Ok(match kind {
            PromptKind::Degradation => stats.degradation_text(),
            PromptKind::Content => stats.content_text(),
        })
    }
}

struct ImageStats {
    mean_luma: f64,
    noise: f64,
    streak_corr: f64,
    streak_rms: f64,
    texture: f64,
    rgb: [f64; 3],
}

impl ImageStats {
    fn of(img: &TensorImage) -> Self {
        let (h, w) = (img.height(), img.width());
        let luma: Vec<f64> = img
            .data()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect();
        let at = |y: usize, x: usize| luma[y * w + x];
        let mut rgb = [0.0; 3];
        for p in img.data().chunks_exact(3) {
            for c in 0..3 {
                rgb[c] += p[c] as f64;
            }
        }
        let n = (h * w) as f64;
        rgb.iter_mut().for_each(|v| *v /= n);
        let mean_luma = luma.iter().sum::<f64>() / n;

        let (mut noise, mut noise_n) = (0.0, 0usize);
        let (mut texture, mut tex_n) = (0.0, 0usize);
        let (mut cross, mut energy, mut hp_n) = (0.0, 0.0, 0usize);
        let blurred = |y: usize, x: usize| {
            let mut s = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    s += at(y + dy - 1, x + dx - 1);
                }
            }
            s / 9.0
        };
        let hp = |y: usize, x: usize| at(y, x) - 0.5 * (at(y, x - 1) + at(y, x + 1));
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                noise += (at(y, x) - blurred(y, x)).abs();
                noise_n += 1;
                let a = hp(y, x);
                let b = hp(y + 1, x);
                cross += a * b;
                energy += a * a;
                hp_n += 1;
            }
        }
        for y in 2..h.saturating_sub(2) {
            for x in 2..w.saturating_sub(2) {
                let gx = blurred(y, x + 1) - blurred(y, x - 1);
                let gy = blurred(y + 1, x) - blurred(y - 1, x);
                texture += (gx * gx + gy * gy).sqrt();
                tex_n += 1;
            }
        }
        let div = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
        Self {
            mean_luma,
            noise: div(noise, noise_n),
            streak_corr: if energy > 0.0 { cross / energy } else { 0.0 },
            streak_rms: div(energy, hp_n).sqrt(),
            texture: div(texture, tex_n),
            rgb,
        }
    }

    fn degradation_text(&self) -> String {
        let mut found = Vec::new();
        if self.mean_luma < 0.25 {
            found.push("low light");
        }
        let rain = self.streak_corr > 0.5 && self.streak_rms > 0.02;
        if rain {
            found.push("rain streaks");
        }
        if !rain && self.noise > 0.03 {
            found.push("gaussian noise");
        }
        if found.is_empty() {
            "no visible degradation".into()
        } else {
            found.join(", ")
        }
    }

    fn content_text(&self) -> String {
        let [r, g, b] = self.rgb;
        let total = r + g + b;
        let tone = if total <= 0.0 {
            "neutral"
        } else {
            let (r, g, b) = (r / total, g / total, b / total);
            if r.max(g).max(b) - r.min(g).min(b) < 0.06 {
                "neutral"
            } else if r > g && r > b {
                if g > b + 0.05 { "warm yellow" } else { "red" }
            } else if g >= r && g > b {
                "green"
            } else {
                "blue"
            }
        };
        let texture = if self.texture > 0.08 { "detailed" } else { "smooth" };
        format!("a {texture} scene dominated by {tone} tones")
    }
}

fn seeded(domain: &str, key: &[u8]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(domain.as_bytes());
    hasher.update(key);
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Deterministic stand-in for a CLIP-style text encoder: token rows are
/// hash-seeded Gaussian vectors, so the output is a pure function of the
/// text.
#[derive(Clone, Debug)]
pub struct FixtureTextEncoder {
    tokens: usize,
    width: usize,
}

impl Default for FixtureTextEncoder {
    fn default() -> Self {
        Self { tokens: TEXT_TOKENS, width: TEXT_WIDTH }
    }
}

impl FixtureTextEncoder {
    pub fn with_shape(tokens: usize, width: usize) -> Self {
        assert!(tokens >= 2 && width >= 1, "fixture encoder needs at least two tokens");
        Self { tokens, width }
    }

    fn vector(&self, domain: &str, key: &str) -> Vec<f64> {
        let mut rng = seeded(domain, key.as_bytes());
        (0..self.width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * z
            })
            .collect()
    }
}

impl TextEncoderProvider for FixtureTextEncoder {
    fn id(&self) -> String {
        format!("fixture-clip-{}x{}", self.tokens, self.width)
    }

    fn shape(&self) -> (usize, usize) {
        (self.tokens, self.width)
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let lower = text.to_lowercase();
        let words: Vec<&str> =
            lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        let mut rows: Vec<Vec<f64>> = vec![self.vector("sot", "")];
        let mut summary = vec![0.0; self.width];
        for (i, word) in words.iter().take(self.tokens - 2).enumerate() {
            let pos = self.vector("pos", &i.to_string());
            let row: Vec<f64> =
                self.vector("token", word).iter().zip(&pos).map(|(t, p)| t + 0.1 * p).collect();
            for (s, v) in summary.iter_mut().zip(&row) {
                *s += v;
            }
            rows.push(row);
        }
        let count = (rows.len() - 1).max(1) as f64;
        let eot: Vec<f64> = self
            .vector("eot", "")
            .iter()
            .zip(&summary)
            .map(|(e, s)| e + s / count)
            .collect();
        while rows.len() < self.tokens {
            rows.push(eot.clone());
        }
        Ok(rows.iter().flatten().map(|&v| v as f32).collect())
    }
}

/// Procedural reference images keyed by `(hash(prompt), seed)`: a
/// two-color gradient with soft blobs, stored at 8-bit precision. The
/// negative prompt does not influence the output.
#[derive(Clone, Debug, Default)]
pub struct FixtureDiffusion;

impl DiffusionProvider for FixtureDiffusion {
    fn id(&self) -> String {
        "fixture-diffusion-v1".into()
    }

    fn generate(&self, req: &DiffusionRequest) -> Result<TensorImage> {
        if req.width == 0 || req.height == 0 {
            return Err(Error::InvalidArgument("reference size must be positive".into()));
        }
        let key = format!("{}:{}", text_hash(&req.prompt), req.seed);
        let mut rng = seeded("diffusion", key.as_bytes());
        let mut color = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let (c0, c1) = (color(), color());
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let side = req.width.max(req.height) as f32;
        let blobs: Vec<([f32; 2], f32, [f32; 3], f32)> = (0..6)
            .map(|_| {
                let center = [
                    rng.random_range(0.0..req.width as f32),
                    rng.random_range(0.0..req.height as f32),
                ];
                let radius = rng.random_range(0.05..0.3) * side;
                let col = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
                let weight = rng.random_range(0.4..0.9);
                (center, radius, col, weight)
            })
            .collect();
        let (w, h) = (req.width as f32, req.height as f32);
        let img = TensorImage::from_fn(req.height, req.width, |y, x, c| {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = (((fx / w - 0.5) * dx + (fy / h - 0.5) * dy) + 0.75) / 1.5;
            let mut v = c0[c] * (1.0 - t) + c1[c] * t;
            for (center, radius, col, weight) in &blobs {
                let d2 = (fx - center[0]).powi(2) + (fy - center[1]).powi(2);
                let a = weight * (-d2 / (2.0 * radius * radius)).exp();
                v = v * (1.0 - a) + col[c] * a;
            }
            v
        });
        Ok(img.quantized())
    }
}

/// Mean-centered 16×16 thumbnail used as an image embedding.
#[derive(Clone, Debug, Default)]
pub struct FixtureImageEncoder;

impl ImageEncoderProvider for FixtureImageEncoder {
    fn id(&self) -> String {
        "fixture-thumbnail-16".into()
    }

    fn embed(&self, image: &TensorImage) -> Result<Vec<f64>> {
        let thumb = image.resize_bilinear(16, 16);
        let v: Vec<f64> = thumb.data().iter().map(|&x| x as f64).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Ok(v.iter().map(|x| x - mean).collect())
    }
}
