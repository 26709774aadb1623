use super::{Graph, Var};
use crate::tensor::Tensor;

/// `c = op(a) · op(b) + beta · c` with row-major storage.
///
/// `op(a)` is `m×k`; when `ta` the buffer holds the `k×m` matrix instead.
/// Likewise `op(b)` is `k×n`, stored `n×k` when `tb`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the buffers whose lengths are
    // asserted against m, k, n; `c` is a distinct mutable slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn row_sums(g: &Tensor, n: usize) -> Tensor {
    let mut out = vec![0.0; n];
    for row in g.data().chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new([n], out)
}

impl Graph {
    /// `x · w (+ b)` over the last axis: `[..., K] × [K, N] -> [..., N]`.
    pub fn linear(&self, x: &Var, w: &Var, b: Option<&Var>) -> Var {
        let k = *x.shape().last().expect("linear on 0-d tensor");
        assert_eq!(w.value().ndim(), 2, "linear weight must be 2-d");
        assert_eq!(w.shape()[0], k, "linear: input has {k} features, weight {:?}", w.shape());
        let n = w.shape()[1];
        let m = x.value().len() / k;
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.value().data(), false, w.value().data(), false, &mut out, 0.0);
        if let Some(b) = b {
            assert_eq!(b.shape(), [n], "linear bias shape");
            for row in out.chunks_exact_mut(n) {
                for (o, bv) in row.iter_mut().zip(b.value().data()) {
                    *o += bv;
                }
            }
        }
        let (xv, wv) = (x.rc(), w.rc());
        let x_shape = x.shape().to_vec();
        let backward = move |g: &Tensor, mask: &[bool]| {
            let dx = mask[0].then(|| {
                let mut dx = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, wv.data(), true, &mut dx, 0.0);
                Tensor::new(x_shape.clone(), dx)
            });
            let dw = mask[1].then(|| {
                let mut dw = vec![0.0; k * n];
                gemm(k, m, n, xv.data(), true, g.data(), false, &mut dw, 0.0);
                Tensor::new([k, n], dw)
            });
            let mut grads = vec![dx, dw];
            if mask.len() == 3 {
                grads.push(mask[2].then(|| row_sums(g, n)));
            }
            grads
        };
        let out = Tensor::new(out_shape, out);
        match b {
            Some(b) => self.record(out, &[x, w, b], backward),
            None => self.record(out, &[x, w], backward),
        }
    }

    /// Batched matrix product over the last two axes, with optional transposes.
    pub fn bmm(&self, a: &Var, ta: bool, b: &Var, tb: bool) -> Var {
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(ash.len() >= 2 && ash.len() == bsh.len(), "bmm rank mismatch {ash:?} {bsh:?}");
        let nd = ash.len();
        assert_eq!(ash[..nd - 2], bsh[..nd - 2], "bmm batch dims differ");
        let (m, k) = if ta { (ash[nd - 1], ash[nd - 2]) } else { (ash[nd - 2], ash[nd - 1]) };
        let (kb, n) = if tb { (bsh[nd - 1], bsh[nd - 2]) } else { (bsh[nd - 2], bsh[nd - 1]) };
        assert_eq!(k, kb, "bmm inner dims differ: {ash:?}{} x {bsh:?}{}", ta, tb);
        let batch: usize = ash[..nd - 2].iter().product();
        let mut out_shape = ash[..nd - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (a.value().data(), b.value().data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                ta,
                &bd[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let (av, bv) = (a.rc(), b.rc());
        self.record(Tensor::new(out_shape, out), &[a, b], move |g, mask| {
            let gd = g.data();
            let da = mask[0].then(|| {
                let mut da = vec![0.0; batch * m * k];
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    if ta {
                        gemm(k, n, m, bi, tb, gi, true, dai, 0.0);
                    } else {
                        gemm(m, n, k, gi, false, bi, !tb, dai, 0.0);
                    }
                }
                Tensor::new(ash.clone(), da)
            });
            let db = mask[1].then(|| {
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if tb {
                        gemm(n, m, k, gi, true, ai, ta, dbi, 0.0);
                    } else {
                        gemm(k, m, n, ai, !ta, gi, false, dbi, 0.0);
                    }
                }
                Tensor::new(bsh.clone(), db)
            });
            vec![da, db]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: &Var) -> Var {
        let n = *x.shape().last().unwrap();
        let mut y = x.value().clone();
        for row in y.data_mut().chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let yv = std::rc::Rc::new(y.clone());
        self.record(y, &[x], move |g, _| {
            let mut dx = g.clone();
            for (drow, yrow) in dx.data_mut().chunks_exact_mut(n).zip(yv.data().chunks_exact(n)) {
                let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (d, y) in drow.iter_mut().zip(yrow) {
                    *d = y * (*d - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// `x / sqrt(|x|^2 + eps)` over the last axis.
    pub fn l2_normalize_last(&self, x: &Var, eps: f64) -> Var {
        let n = *x.shape().last().unwrap();
        let mut y = x.value().clone();
        let mut norms = Vec::with_capacity(y.len() / n.max(1));
        for row in y.data_mut().chunks_exact_mut(n) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let yv = std::rc::Rc::new(y.clone());
        self.record(y, &[x], move |g, _| {
            let mut dx = g.clone();
            for ((drow, yrow), norm) in
                dx.data_mut().chunks_exact_mut(n).zip(yv.data().chunks_exact(n)).zip(&norms)
            {
                let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (d, y) in drow.iter_mut().zip(yrow) {
                    *d = (*d - y * dot) / norm;
                }
            }
            vec![Some(dx)]
        })
    }

    /// Layer normalization over the last axis with affine `weight`, `bias`.
    pub fn layer_norm(&self, x: &Var, weight: &Var, bias: &Var, eps: f64) -> Var {
        let c = *x.shape().last().unwrap();
        assert_eq!(weight.shape(), [c]);
        assert_eq!(bias.shape(), [c]);
        let rows = x.value().len() / c;
        let mut xhat = x.value().clone();
        let mut inv_std = Vec::with_capacity(rows);
        for row in xhat.data_mut().chunks_exact_mut(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * is);
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_exact_mut(c) {
            for ((v, w), b) in row.iter_mut().zip(weight.value().data()).zip(bias.value().data()) {
                *v = *v * w + b;
            }
        }
        let wv = weight.rc();
        self.record(y, &[x, weight, bias], move |g, mask| {
            let dx = mask[0].then(|| {
                let mut dx = g.clone();
                for ((drow, xrow), is) in
                    dx.data_mut().chunks_exact_mut(c).zip(xhat.data().chunks_exact(c)).zip(&inv_std)
                {
                    for (d, w) in drow.iter_mut().zip(wv.data()) {
                        *d *= w;
                    }
                    let mean_d = drow.iter().sum::<f64>() / c as f64;
                    let mean_dx = drow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for (d, xh) in drow.iter_mut().zip(xrow) {
                        *d = is * (*d - mean_d - xh * mean_dx);
                    }
                }
                dx
            });
            let dw = mask[1].then(|| {
                let mut dw = vec![0.0; c];
                for (grow, xrow) in g.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
                    for k in 0..c {
                        dw[k] += grow[k] * xrow[k];
                    }
                }
                Tensor::new([c], dw)
            });
            let db = mask[2].then(|| row_sums(g, c));
            vec![dx, dw, db]
        })
    }
}
