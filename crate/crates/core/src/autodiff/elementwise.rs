use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{Graph, Var};
use crate::tensor::{pairwise_sum, Tensor};

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Splits `[B, ..., C]` into `(B, inner, C)` for per-(batch, channel) broadcasting.
fn bc_dims(x: &Tensor, s: &Tensor) -> (usize, usize, usize) {
    assert_eq!(s.ndim(), 2, "broadcast operand must be [B, C], got {:?}", s.shape());
    let b = x.dim(0);
    let c = *x.shape().last().unwrap();
    assert_eq!(s.shape(), [b, c], "broadcast operand {:?} does not fit {:?}", s.shape(), x.shape());
    (b, x.len() / (b * c), c)
}

impl Graph {
    fn unary(&self, x: &Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var {
        let out = x.value().map(&f);
        let xv = x.rc();
        self.record(out, &[x], move |g, _| vec![Some(g.zip_map(&xv, |gi, xi| gi * df(xi)))])
    }

    pub fn relu(&self, x: &Var) -> Var {
        self.unary(x, |v| v.max(0.0), |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&self, x: &Var) -> Var {
        self.unary(x, gelu, gelu_grad)
    }

    pub fn silu(&self, x: &Var) -> Var {
        self.unary(x, silu, silu_grad)
    }

    /// Clamps to `[0, 1]`; gradient passes only strictly inside the interval.
    pub fn clamp01(&self, x: &Var) -> Var {
        self.unary(x, |v| v.clamp(0.0, 1.0), |v| if v > 0.0 && v < 1.0 { 1.0 } else { 0.0 })
    }

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        let out = a.value().zip_map(b.value(), |x, y| x + y);
        self.record(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        let out = a.value().zip_map(b.value(), |x, y| x - y);
        self.record(out, &[a, b], |g, m| vec![Some(g.clone()), m[1].then(|| g.scale(-1.0))])
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        let out = a.value().zip_map(b.value(), |x, y| x * y);
        let (av, bv) = (a.rc(), b.rc());
        self.record(out, &[a, b], move |g, m| {
            vec![
                m[0].then(|| g.zip_map(&bv, |gi, y| gi * y)),
                m[1].then(|| g.zip_map(&av, |gi, x| gi * x)),
            ]
        })
    }

    pub fn scale(&self, x: &Var, s: f64) -> Var {
        let out = x.value().scale(s);
        self.record(out, &[x], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&self, x: &Var, s: f64) -> Var {
        let out = x.value().map(|v| v + s);
        self.record(out, &[x], |g, _| vec![Some(g.clone())])
    }

    /// `x + bias` with `bias: [C]` broadcast over the last axis.
    pub fn bias_add(&self, x: &Var, bias: &Var) -> Var {
        let c = bias.value().len();
        assert_eq!(*x.shape().last().unwrap(), c, "bias length does not match channels");
        let mut out = x.value().clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(bias.value().data()) {
                *o += b;
            }
        }
        self.record(out, &[x, bias], move |g, m| {
            let db = m[1].then(|| {
                let mut db = vec![0.0; c];
                for row in g.data().chunks_exact(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                Tensor::new([c], db)
            });
            vec![Some(g.clone()), db]
        })
    }

    /// `x * s` with `s: [B, C]` broadcast over all inner axes of `x: [B, ..., C]`.
    pub fn mul_bc(&self, x: &Var, s: &Var) -> Var {
        let (b, inner, c) = bc_dims(x.value(), s.value());
        let mut out = x.value().clone();
        let sd = s.value().data();
        for (i, row) in out.data_mut().chunks_exact_mut(c).enumerate() {
            let bi = i / inner;
            for (o, sv) in row.iter_mut().zip(&sd[bi * c..(bi + 1) * c]) {
                *o *= sv;
            }
        }
        let (xv, sv) = (x.rc(), s.rc());
        self.record(out, &[x, s], move |g, m| {
            let dx = m[0].then(|| {
                let mut dx = g.clone();
                let sd = sv.data();
                for (i, row) in dx.data_mut().chunks_exact_mut(c).enumerate() {
                    let bi = i / inner;
                    for (o, s) in row.iter_mut().zip(&sd[bi * c..(bi + 1) * c]) {
                        *o *= s;
                    }
                }
                dx
            });
            let ds = m[1].then(|| {
                let mut ds = vec![0.0; b * c];
                for (i, (grow, xrow)) in
                    g.data().chunks_exact(c).zip(xv.data().chunks_exact(c)).enumerate()
                {
                    let bi = i / inner;
                    for k in 0..c {
                        ds[bi * c + k] += grow[k] * xrow[k];
                    }
                }
                Tensor::new([b, c], ds)
            });
            vec![dx, ds]
        })
    }

    /// `x + s` with `s: [B, C]` broadcast over all inner axes of `x: [B, ..., C]`.
    pub fn add_bc(&self, x: &Var, s: &Var) -> Var {
        let (b, inner, c) = bc_dims(x.value(), s.value());
        let mut out = x.value().clone();
        let sd = s.value().data();
        for (i, row) in out.data_mut().chunks_exact_mut(c).enumerate() {
            let bi = i / inner;
            for (o, sv) in row.iter_mut().zip(&sd[bi * c..(bi + 1) * c]) {
                *o += sv;
            }
        }
        self.record(out, &[x, s], move |g, m| {
            let ds = m[1].then(|| {
                let mut ds = vec![0.0; b * c];
                for (i, row) in g.data().chunks_exact(c).enumerate() {
                    let bi = i / inner;
                    for k in 0..c {
                        ds[bi * c + k] += row[k];
                    }
                }
                Tensor::new([b, c], ds)
            });
            vec![Some(g.clone()), ds]
        })
    }

    /// Multiplies `x: [B, heads, ...]` by a per-head scalar `t: [heads]`.
    pub fn mul_heads(&self, x: &Var, t: &Var) -> Var {
        let heads = t.value().len();
        assert_eq!(x.shape()[1], heads, "head count mismatch");
        let block = x.value().len() / (x.shape()[0] * heads);
        let mut out = x.value().clone();
        let td = t.value().data().to_vec();
        for (i, chunk) in out.data_mut().chunks_exact_mut(block).enumerate() {
            let s = td[i % heads];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let (xv, tv) = (x.rc(), t.rc());
        self.record(out, &[x, t], move |g, m| {
            let dx = m[0].then(|| {
                let mut dx = g.clone();
                for (i, chunk) in dx.data_mut().chunks_exact_mut(block).enumerate() {
                    let s = tv.data()[i % heads];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                dx
            });
            let dt = m[1].then(|| {
                let mut dt = vec![0.0; heads];
                for (i, (gc, xc)) in
                    g.data().chunks_exact(block).zip(xv.data().chunks_exact(block)).enumerate()
                {
                    dt[i % heads] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                }
                Tensor::new([heads], dt)
            });
            vec![dx, dt]
        })
    }

    pub fn sum(&self, x: &Var) -> Var {
        let shape = x.shape().to_vec();
        self.record(Tensor::scalar(x.value().sum()), &[x], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(&self, x: &Var) -> Var {
        let n = x.value().len() as f64;
        let s = self.sum(x);
        self.scale(&s, 1.0 / n)
    }

    /// Mean over `axis`, removing it. Uses pairwise summation.
    pub fn mean_axis(&self, x: &Var, axis: usize) -> Var {
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let xd = x.value().data();
        let mut out = vec![0.0; outer * inner];
        let mut column = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (k, c) in column.iter_mut().enumerate() {
                    *c = xd[(o * n + k) * inner + i];
                }
                out[o * inner + i] = pairwise_sum(&column) / n as f64;
            }
        }
        self.record(Tensor::new(out_shape, out), &[x], move |g, _| {
            let gd = g.data();
            let mut dx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        dx[(o * n + k) * inner + i] = gd[o * inner + i] / n as f64;
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), dx))]
        })
    }

    /// Mean absolute error against a constant target. Subgradient 0 at zero residual.
    pub fn l1_loss(&self, y: &Var, target: &Tensor) -> Var {
        assert_eq!(y.shape(), target.shape(), "l1_loss shape mismatch");
        let n = y.value().len() as f64;
        let diff = y.value().zip_map(target, |a, b| a - b);
        let loss = pairwise_sum(&diff.data().iter().map(|d| d.abs()).collect::<Vec<_>>()) / n;
        self.record(Tensor::scalar(loss), &[y], move |g, _| {
            let s = g.item() / n;
            vec![Some(diff.map(|d| {
                if d > 0.0 {
                    s
                } else if d < 0.0 {
                    -s
                } else {
                    0.0
                }
            }))]
        })
    }

    /// `sum(x * w)` for a constant weight tensor; the standard probe for gradient checks.
    pub fn weighted_sum(&self, x: &Var, w: &Tensor) -> Var {
        assert_eq!(x.shape(), w.shape());
        let v = x.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
        let w = w.clone();
        self.record(Tensor::scalar(v), &[x], move |g, _| vec![Some(w.scale(g.item()))])
    }
}
