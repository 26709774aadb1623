use super::linalg::gemm;
use super::shape::dims4;
use super::{Graph, Var};
use crate::tensor::Tensor;

struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.b * self.oh * self.ow
    }

    fn cols(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut col = vec![0.0; g.rows() * g.cols()];
    let mut r = 0;
    for bi in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut col[r * g.cols()..(r + 1) * g.cols()];
                let mut k = 0;
                for ky in 0..g.kh {
                    let base = ((bi * g.h + oy * g.stride + ky) * g.w + ox * g.stride) * g.cin;
                    let len = g.kw * g.cin;
                    dst[k..k + len].copy_from_slice(&x[base..base + len]);
                    k += len;
                }
                r += 1;
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.b * g.h * g.w * g.cin];
    let mut r = 0;
    for bi in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &col[r * g.cols()..(r + 1) * g.cols()];
                let mut k = 0;
                for ky in 0..g.kh {
                    let base = ((bi * g.h + oy * g.stride + ky) * g.w + ox * g.stride) * g.cin;
                    let len = g.kw * g.cin;
                    for (d, s) in dx[base..base + len].iter_mut().zip(&src[k..k + len]) {
                        *d += s;
                    }
                    k += len;
                }
                r += 1;
            }
        }
    }
    dx
}

impl Graph {
    /// Valid (unpadded) 2-d convolution, channels-last.
    ///
    /// `x: [B, H, W, Cin]`, `w: [kh, kw, Cin, Cout]`, `b: [Cout]`.
    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, stride: usize) -> Var {
        let (bsz, h, wd, cin) = dims4(x.value());
        let ws = w.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [kh, kw, Cin, Cout]");
        assert_eq!(ws[2], cin, "conv expects {} input channels, got {cin}", ws[2]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        assert!(h >= kh && wd >= kw, "conv input {h}x{wd} smaller than kernel");
        let geom = ConvGeom {
            b: bsz,
            h,
            w: wd,
            cin,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (wd - kw) / stride + 1,
        };
        let col = im2col(x.value().data(), &geom);
        let (m, k) = (geom.rows(), geom.cols());
        let mut out = vec![0.0; m * cout];
        gemm(m, k, cout, &col, false, w.value().data(), false, &mut out, 0.0);
        drop(col);
        if let Some(b) = b {
            assert_eq!(b.shape(), [cout]);
            for row in out.chunks_exact_mut(cout) {
                for (o, bv) in row.iter_mut().zip(b.value().data()) {
                    *o += bv;
                }
            }
        }
        let out = Tensor::new([bsz, geom.oh, geom.ow, cout], out);
        let (xv, wv) = (x.rc(), w.rc());
        let w_shape = ws.to_vec();
        let x_shape = x.shape().to_vec();
        let backward = move |g: &Tensor, mask: &[bool]| {
            let gd = g.data();
            let dx = mask[0].then(|| {
                let mut dcol = vec![0.0; m * k];
                gemm(m, cout, k, gd, false, wv.data(), true, &mut dcol, 0.0);
                Tensor::new(x_shape.clone(), col2im(&dcol, &geom))
            });
            let dw = mask[1].then(|| {
                let col = im2col(xv.data(), &geom);
                let mut dw = vec![0.0; k * cout];
                gemm(k, m, cout, &col, true, gd, false, &mut dw, 0.0);
                Tensor::new(w_shape.clone(), dw)
            });
            let mut grads = vec![dx, dw];
            if mask.len() == 3 {
                grads.push(mask[2].then(|| {
                    let mut db = vec![0.0; cout];
                    for row in gd.chunks_exact(cout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Tensor::new([cout], db)
                }));
            }
            grads
        };
        match b {
            Some(b) => self.record(out, &[x, w, b], backward),
            None => self.record(out, &[x, w], backward),
        }
    }

    /// Valid depthwise convolution: `x: [B, H, W, C]`, `w: [kh, kw, C]`, `b: [C]`.
    pub fn depthwise_conv2d(&self, x: &Var, w: &Var, b: &Var) -> Var {
        let (bsz, h, wd, c) = dims4(x.value());
        let ws = w.shape();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[2], c, "depthwise channels mismatch");
        let (kh, kw) = (ws[0], ws[1]);
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let (xd, wdat, bd) = (x.value().data(), w.value().data(), b.value().data());
        let mut out = vec![0.0; bsz * oh * ow * c];
        for bi in 0..bsz {
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = ((bi * oh + oy) * ow + ox) * c;
                    let o = &mut out[dst..dst + c];
                    o.copy_from_slice(bd);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let src = ((bi * h + oy + ky) * wd + ox + kx) * c;
                            let wk = &wdat[(ky * kw + kx) * c..(ky * kw + kx + 1) * c];
                            for ch in 0..c {
                                o[ch] += xd[src + ch] * wk[ch];
                            }
                        }
                    }
                }
            }
        }
        let (xv, wv) = (x.rc(), w.rc());
        let (x_shape, w_shape) = (x.shape().to_vec(), ws.to_vec());
        self.record(Tensor::new([bsz, oh, ow, c], out), &[x, w, b], move |g, mask| {
            let gd = g.data();
            let mut dx = mask[0].then(|| vec![0.0; x_shape.iter().product()]);
            let mut dw = mask[1].then(|| vec![0.0; kh * kw * c]);
            let (xd, wdat) = (xv.data(), wv.data());
            for bi in 0..bsz {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = &gd[((bi * oh + oy) * ow + ox) * c..][..c];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let src = ((bi * h + oy + ky) * wd + ox + kx) * c;
                                let widx = (ky * kw + kx) * c;
                                if let Some(dx) = dx.as_mut() {
                                    for ch in 0..c {
                                        dx[src + ch] += go[ch] * wdat[widx + ch];
                                    }
                                }
                                if let Some(dw) = dw.as_mut() {
                                    for ch in 0..c {
                                        dw[widx + ch] += go[ch] * xd[src + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let db = mask[2].then(|| {
                let mut db = vec![0.0; c];
                for row in gd.chunks_exact(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                Tensor::new([c], db)
            });
            vec![
                dx.map(|d| Tensor::new(x_shape.clone(), d)),
                dw.map(|d| Tensor::new(w_shape.clone(), d)),
                db,
            ]
        })
    }
}
