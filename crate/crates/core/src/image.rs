//! `H×W×3` RGB images in `[0, 1]`, the unit of all image I/O.

use std::io::Cursor;
use std::path::Path;

use ::image::{ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl TensorImage {
    /// Builds an image from interleaved RGB samples, clamping into `[0, 1]`.
    /// NaN samples become 0.
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("image size {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape("TensorImage::new", format!("{}", height * width * 3), data.len()));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data).expect("non-empty constant image")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data).expect("from_fn sizes are consistent")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Canonical byte serialization: `height`, `width` as u32 LE, then the
    /// samples as f32 LE in row-major RGB order.
    pub fn raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 4);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Lowercase SHA-256 hex digest of [`raw_bytes`](Self::raw_bytes).
    pub fn content_id(&self) -> String {
        hex::encode(Sha256::digest(self.raw_bytes()))
    }

    /// True when every sample equals the first one.
    pub fn is_constant(&self) -> bool {
        let first = self.data[0];
        self.data.iter().all(|&v| v == first)
    }

    /// `[1, H, W, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.height, self.width, 3], self.data.iter().map(|&v| v as f64).collect())
    }

    /// From a `[1, H, W, 3]` or `[H, W, 3]` tensor; values are clamped.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [1, h, w, 3] | [h, w, 3] => (*h, *w),
            _ => return Err(Error::shape("TensorImage::from_tensor", "[1, H, W, 3]", s)),
        };
        Self::new(h, w, t.data().iter().map(|&v| v as f32).collect())
    }

    /// Bilinear resize with half-pixel centers. Same-size resizes return a copy.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> TensorImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ys = axis_taps(self.height, height);
        let xs = axis_taps(self.width, width);
        let mut data = Vec::with_capacity(height * width * 3);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..3 {
                    let top = self.get(y0, x0, c) as f64 * (1.0 - fx) + self.get(y0, x1, c) as f64 * fx;
                    let bot = self.get(y1, x0, c) as f64 * (1.0 - fx) + self.get(y1, x1, c) as f64 * fx;
                    data.push((top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
        TensorImage { height, width, data }
    }

    /// Quantizes to 8-bit RGB.
    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer sized from dims")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data).expect("decoded image is non-empty")
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = ::image::load_from_memory(bytes)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::decode(&bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(Error::io(path))
    }

    /// Rounds through 8-bit storage, matching what a PNG round trip yields.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(&self.to_rgb8())
    }
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}
