use super::{Graph, Var};
use crate::tensor::{strides, Tensor};

/// Spatial padding modes for `[B, H, W, C]` maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Reflect index `i` into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

pub(crate) fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    assert_eq!(perm.len(), shape.len(), "permutation rank mismatch");
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    if nd == 0 {
        return x.clone();
    }
    let xd = x.data();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    let last = nd - 1;
    let (last_len, last_stride) = (out_shape[last], src_strides[last]);
    if n == 0 {
        return Tensor::new(out_shape, out);
    }
    loop {
        for j in 0..last_len {
            out.push(xd[offset + j * last_stride]);
        }
        // advance all but the last axis
        let mut axis = last;
        loop {
            if axis == 0 {
                return Tensor::new(out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            offset += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

/// Gathers rows/columns of a `[B, H, W, C]` map; `None` produces zeros.
fn spatial_gather(x: &Tensor, rows: &[Option<usize>], cols: &[Option<usize>]) -> Tensor {
    let (b, h, w, c) = dims4(x);
    let (oh, ow) = (rows.len(), cols.len());
    let xd = x.data();
    let mut out = vec![0.0; b * oh * ow * c];
    for bi in 0..b {
        for (oy, r) in rows.iter().enumerate() {
            let Some(r) = r else { continue };
            for (ox, col) in cols.iter().enumerate() {
                let Some(col) = col else { continue };
                let src = ((bi * h + r) * w + col) * c;
                let dst = ((bi * oh + oy) * ow + ox) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    Tensor::new([b, oh, ow, c], out)
}

fn spatial_scatter(
    g: &Tensor,
    in_shape: &[usize],
    rows: &[Option<usize>],
    cols: &[Option<usize>],
) -> Tensor {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (rows.len(), cols.len());
    let gd = g.data();
    let mut dx = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for (oy, r) in rows.iter().enumerate() {
            let Some(r) = r else { continue };
            for (ox, col) in cols.iter().enumerate() {
                let Some(col) = col else { continue };
                let dst = ((bi * h + r) * w + col) * c;
                let src = ((bi * oh + oy) * ow + ox) * c;
                for k in 0..c {
                    dx[dst + k] += gd[src + k];
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

pub(crate) fn dims4(x: &Tensor) -> (usize, usize, usize, usize) {
    assert_eq!(x.ndim(), 4, "expected [B, H, W, C], got {:?}", x.shape());
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

fn pad_index_map(n: usize, before: usize, after: usize, mode: PadMode) -> Vec<Option<usize>> {
    (0..n + before + after)
        .map(|i| {
            let src = i as isize - before as isize;
            if (0..n as isize).contains(&src) {
                Some(src as usize)
            } else {
                match mode {
                    PadMode::Zero => None,
                    PadMode::Reflect => Some(reflect_index(src, n)),
                }
            }
        })
        .collect()
}

/// Pads a `[B, H, W, C]` tensor outside of any graph.
pub fn pad_tensor(
    x: &Tensor,
    (top, bottom, left, right): (usize, usize, usize, usize),
    mode: PadMode,
) -> Tensor {
    let (_, h, w, _) = dims4(x);
    spatial_gather(x, &pad_index_map(h, top, bottom, mode), &pad_index_map(w, left, right, mode))
}

impl Graph {
    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Var {
        let old = x.shape().to_vec();
        let out = x.value().clone().reshape(shape.to_vec());
        self.record(out, &[x], move |g, _| vec![Some(g.clone().reshape(old.clone()))])
    }

    pub fn permute(&self, x: &Var, perm: &[usize]) -> Var {
        let out = permute_tensor(x.value(), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.record(out, &[x], move |g, _| vec![Some(permute_tensor(g, &inverse))])
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&self, parts: &[&Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(&s[..s.len() - 1], lead, "concat_last leading dims differ");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value().data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let lead = lead.to_vec();
        self.record(Tensor::new(shape, out), parts, move |g, mask| {
            let mut offset = 0;
            widths
                .iter()
                .zip(mask)
                .map(|(&wd, &need)| {
                    let start = offset;
                    offset += wd;
                    need.then(|| {
                        let mut d = Vec::with_capacity(rows * wd);
                        for row in g.data().chunks_exact(total) {
                            d.extend_from_slice(&row[start..start + wd]);
                        }
                        let mut s = lead.clone();
                        s.push(wd);
                        Tensor::new(s, d)
                    })
                })
                .collect()
        })
    }

    /// Channels `[start, start + len)` of the last axis.
    pub fn slice_last(&self, x: &Var, start: usize, len: usize) -> Var {
        let shape = x.shape().to_vec();
        let c = *shape.last().unwrap();
        assert!(start + len <= c, "slice_last out of range");
        let mut out = Vec::with_capacity(x.value().len() / c * len);
        for row in x.value().data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        self.record(Tensor::new(out_shape, out), &[x], move |g, _| {
            let mut dx = vec![0.0; shape.iter().product()];
            for (drow, grow) in dx.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                drow[start..start + len].copy_from_slice(grow);
            }
            vec![Some(Tensor::new(shape.clone(), dx))]
        })
    }

    /// Spatial padding of a `[B, H, W, C]` map.
    pub fn pad(&self, x: &Var, pads: (usize, usize, usize, usize), mode: PadMode) -> Var {
        let (_, h, w, _) = dims4(x.value());
        let (top, bottom, left, right) = pads;
        let rows = pad_index_map(h, top, bottom, mode);
        let cols = pad_index_map(w, left, right, mode);
        self.gather_spatial(x, rows, cols)
    }

    /// Spatial crop of a `[B, H, W, C]` map.
    pub fn crop(&self, x: &Var, top: usize, left: usize, height: usize, width: usize) -> Var {
        let (_, h, w, _) = dims4(x.value());
        assert!(top + height <= h && left + width <= w, "crop out of bounds");
        let rows = (top..top + height).map(Some).collect();
        let cols = (left..left + width).map(Some).collect();
        self.gather_spatial(x, rows, cols)
    }

    fn gather_spatial(&self, x: &Var, rows: Vec<Option<usize>>, cols: Vec<Option<usize>>) -> Var {
        let out = spatial_gather(x.value(), &rows, &cols);
        let in_shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| vec![Some(spatial_scatter(g, &in_shape, &rows, &cols))])
    }

    /// Tiles a `[1, ...]` value `n` times along the leading axis.
    pub fn repeat_batch(&self, x: &Var, n: usize) -> Var {
        assert_eq!(x.shape()[0], 1, "repeat_batch expects a leading axis of 1");
        if n == 1 {
            return x.clone();
        }
        let mut shape = x.shape().to_vec();
        shape[0] = n;
        let block = x.value().len();
        let mut out = Vec::with_capacity(block * n);
        for _ in 0..n {
            out.extend_from_slice(x.value().data());
        }
        let in_shape = x.shape().to_vec();
        self.record(Tensor::new(shape, out), &[x], move |g, _| {
            let mut dx = vec![0.0; block];
            for chunk in g.data().chunks_exact(block) {
                for (d, v) in dx.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), dx))]
        })
    }

    /// `[B, H, W, r*r*C] -> [B, H*r, W*r, C]`.
    pub fn pixel_shuffle(&self, x: &Var, r: usize) -> Var {
        let (b, h, w, c4) = dims4(x.value());
        assert_eq!(c4 % (r * r), 0, "pixel_shuffle channels not divisible by r^2");
        let c = c4 / (r * r);
        let t = self.reshape(x, &[b, h, w, r, r, c]);
        let t = self.permute(&t, &[0, 1, 3, 2, 4, 5]);
        self.reshape(&t, &[b, h * r, w * r, c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let y = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(y.shape(), [4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.data()[(c * 2 + a) * 3 + b], x.data()[(a * 3 + b) * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_places_subpixels() {
        let g = Graph::inference();
        // one pixel, four channels -> 2x2 single channel
        let x = g.constant(Tensor::new([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), [1, 2, 2, 1]);
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
