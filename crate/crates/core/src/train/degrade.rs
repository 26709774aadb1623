//! Synthetic degradations and scenes for desk-scale data.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::TensorImage;

/// `clamp(G + n)`, `n ~ N(0, (σ/255)²)` per sample.
pub fn add_gaussian_noise<R: Rng + ?Sized>(clean: &TensorImage, sigma_255: f64, rng: &mut R) -> TensorImage {
    if sigma_255 <= 0.0 {
        return clean.clone();
    }
    let normal = Normal::new(0.0, sigma_255 / 255.0).expect("positive std");
    let data = clean.data().iter().map(|&v| (v as f64 + normal.sample(rng)) as f32).collect();
    TensorImage::new(clean.height(), clean.width(), data).expect("same size")
}

/// `scale · G^gamma` per sample.
pub fn synthesize_lowlight(clean: &TensorImage, gamma: f64, scale: f64) -> TensorImage {
    assert!(gamma > 0.0 && scale > 0.0 && scale <= 1.0, "gamma > 0 and scale in (0, 1] required");
    if gamma == 1.0 && scale == 1.0 {
        return clean.clone();
    }
    let data = clean.data().iter().map(|&v| (scale * (v as f64).powf(gamma)) as f32).collect();
    TensorImage::new(clean.height(), clean.width(), data).expect("same size")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    pub count: usize,
    /// Streak length range in pixels.
    pub length: (f64, f64),
    /// Angle from vertical, degrees.
    pub angle_deg: (f64, f64),
    pub opacity: (f64, f64),
    /// Gaussian cross-section std in pixels.
    pub width: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self { count: 40, length: (8.0, 20.0), angle_deg: (-15.0, 15.0), opacity: (0.3, 0.6), width: 0.6 }
    }
}

impl RainParams {
    /// Denser, longer and brighter streaks.
    pub fn heavy() -> Self {
        Self { count: 90, length: (14.0, 32.0), angle_deg: (-20.0, 20.0), opacity: (0.5, 0.8), width: 0.8 }
    }

    pub fn scaled_count(&self, height: usize, width: usize) -> usize {
        // counts are given per 64×64 area
        ((self.count * height * width) as f64 / 4096.0).round() as usize
    }
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Adds oriented line streaks with a Gaussian cross-section, then clamps.
pub fn synthesize_rain<R: Rng + ?Sized>(clean: &TensorImage, params: &RainParams, rng: &mut R) -> TensorImage {
    let (h, w) = (clean.height(), clean.width());
    let count = params.scaled_count(h, w);
    if count == 0 {
        return clean.clone();
    }
    let mut layer = vec![0.0f64; h * w];
    let sigma = params.width.max(1e-3);
    for _ in 0..count {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let len = sample_range(rng, params.length);
        let angle = sample_range(rng, params.angle_deg).to_radians();
        let alpha = sample_range(rng, params.opacity);
        let (dy, dx) = (angle.cos(), angle.sin());
        let reach = len / 2.0 + 3.0 * sigma;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(h - 1);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let along = py * dy + px * dx;
                if along.abs() > len / 2.0 {
                    continue;
                }
                let across = px * dy - py * dx;
                let v = alpha * (-across * across / (2.0 * sigma * sigma)).exp();
                let cell = &mut layer[y * w + x];
                *cell = 1.0 - (1.0 - *cell) * (1.0 - v);
            }
        }
    }
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let a = layer[i / 3];
            (v as f64 * (1.0 - a) + a) as f32
        })
        .collect();
    TensorImage::new(h, w, data).expect("same size")
}

/// Piecewise-smooth synthetic scene: a gradient background with a few
/// flat-colored rectangles and discs.
pub fn synthetic_scene<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> TensorImage {
    let color = |rng: &mut R| [rng.random_range(0.15..0.85f32), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
    let (c0, c1) = (color(rng), color(rng));
    let horizontal: bool = rng.random();
    enum Shape {
        Rect { y0: f32, y1: f32, x0: f32, x1: f32 },
        Disc { cy: f32, cx: f32, r: f32 },
    }
    let (hf, wf) = (height as f32, width as f32);
    let shapes: Vec<(Shape, [f32; 3])> = (0..4)
        .map(|_| {
            let shape = if rng.random::<bool>() {
                let (a, b) = (rng.random_range(0.0..hf), rng.random_range(0.0..hf));
                let (c, d) = (rng.random_range(0.0..wf), rng.random_range(0.0..wf));
                Shape::Rect { y0: a.min(b), y1: a.max(b) + 2.0, x0: c.min(d), x1: c.max(d) + 2.0 }
            } else {
                Shape::Disc {
                    cy: rng.random_range(0.0..hf),
                    cx: rng.random_range(0.0..wf),
                    r: rng.random_range(0.1..0.35) * hf.min(wf),
                }
            };
            (shape, color(rng))
        })
        .collect();
    TensorImage::from_fn(height, width, |y, x, c| {
        let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
        let t = if horizontal { fx / wf } else { fy / hf };
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for (shape, col) in &shapes {
            let inside = match *shape {
                Shape::Rect { y0, y1, x0, x1 } => fy >= y0 && fy < y1 && fx >= x0 && fx < x1,
                Shape::Disc { cy, cx, r } => (fy - cy).powi(2) + (fx - cx).powi(2) <= r * r,
            };
            if inside {
                v = col[c];
            }
        }
        v
    })
}
