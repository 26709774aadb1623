//! PSNR and SSIM on RGB images.

use crate::error::{Error, Result};
use crate::image::TensorImage;

/// Value reported when the two images are identical.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_size(op: &'static str, y: &TensorImage, g: &TensorImage) -> Result<()> {
    if (y.height(), y.width()) != (g.height(), g.width()) {
        return Err(Error::shape(op, format!("{}x{}", g.height(), g.width()), (y.height(), y.width())));
    }
    Ok(())
}

fn to_f64(img: &TensorImage) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

/// `10·log10(range² / MSE)` over every element, capped at [`PSNR_CAP`].
pub fn psnr(y: &TensorImage, g: &TensorImage, data_range: f64) -> Result<f64> {
    same_size("psnr", y, g)?;
    psnr_slices(&to_f64(y), &to_f64(g), data_range)
}

pub fn psnr_slices(y: &[f64], g: &[f64], data_range: f64) -> Result<f64> {
    if y.len() != g.len() || y.is_empty() {
        return Err(Error::shape("psnr", format!("{} elements", g.len()), y.len()));
    }
    let mse = y.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5) over the valid
/// region, computed per channel and averaged.
pub fn ssim(y: &TensorImage, g: &TensorImage, data_range: f64) -> Result<f64> {
    same_size("ssim", y, g)?;
    ssim_planes(&to_f64(y), &to_f64(g), y.height(), y.width(), 3, data_range)
}

/// SSIM on interleaved `[H, W, C]` buffers.
pub fn ssim_planes(y: &[f64], g: &[f64], height: usize, width: usize, channels: usize, data_range: f64) -> Result<f64> {
    let n = height * width * channels;
    if y.len() != n || g.len() != n {
        return Err(Error::shape("ssim", format!("{n} elements"), (y.len(), g.len())));
    }
    if height.min(width) < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { height, width, min: SSIM_WINDOW });
    }
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for c in 0..channels {
        let plane = |src: &[f64]| (0..height * width).map(|i| src[i * channels + c]).collect::<Vec<_>>();
        let (a, b) = (plane(y), plane(g));
        let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let filt = |src: &[f64]| filter_valid(src, height, width, &kernel);
        let (mu_a, mu_b) = (filt(&a), filt(&b));
        let (e_aa, e_bb, e_ab) = (filt(&sq(&a, &a)), filt(&sq(&b, &b)), filt(&sq(&a, &b)));
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / channels as f64)
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn filter_valid(src: &[f64], height: usize, width: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (height - n + 1, width - n + 1);
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|j| k[j] * src[y * width + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}
