//! Straight-loop float64 reference implementations used as test oracles.
//!
//! Everything here indexes plain vectors directly and shares no code with
//! the graph operators it checks.

#![allow(dead_code)]

use lmdir_core::autodiff::{Graph, Var};
use lmdir_core::gradcheck::{numeric_grad_adaptive, ADAPTIVE_STEPS, MAGNITUDE_FLOOR};
use lmdir_core::params::{ParamStore, Scope};
use lmdir_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Maximum absolute difference scaled by the reference's largest magnitude.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

/// Channels-last map `[B, H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Map {
    pub fn zeros(b: usize, h: usize, w: usize, c: usize) -> Self {
        Self { b, h, w, c, d: vec![0.0; b * h * w * c] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 4);
        Self { b: s[0], h: s[1], w: s[2], c: s[3], d: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.b, self.h, self.w, self.c], self.d.clone())
    }

    pub fn idx(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        ((b * self.h + y) * self.w + x) * self.c + c
    }

    pub fn at(&self, b: usize, y: usize, x: usize, c: usize) -> f64 {
        self.d[self.idx(b, y, x, c)]
    }

    pub fn set(&mut self, b: usize, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(b, y, x, c);
        self.d[i] = v;
    }

    pub fn pixel(&self, b: usize, y: usize, x: usize) -> Vec<f64> {
        (0..self.c).map(|c| self.at(b, y, x, c)).collect()
    }

    /// Applies `f` to every pixel vector.
    pub fn map_pixels(&self, out_c: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Map {
        let mut out = Map::zeros(self.b, self.h, self.w, out_c);
        for b in 0..self.b {
            for y in 0..self.h {
                for x in 0..self.w {
                    let v = f(&self.pixel(b, y, x));
                    assert_eq!(v.len(), out_c);
                    for (c, val) in v.into_iter().enumerate() {
                        out.set(b, y, x, c, val);
                    }
                }
            }
        }
        out
    }

    pub fn add(&self, o: &Map) -> Map {
        assert_eq!((self.b, self.h, self.w, self.c), (o.b, o.h, o.w, o.c));
        Map { d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect(), ..self.clone() }
    }

    pub fn channels(&self, start: usize, len: usize) -> Map {
        let mut out = Map::zeros(self.b, self.h, self.w, len);
        for b in 0..self.b {
            for y in 0..self.h {
                for x in 0..self.w {
                    for c in 0..len {
                        out.set(b, y, x, c, self.at(b, y, x, start + c));
                    }
                }
            }
        }
        out
    }

    pub fn concat(&self, o: &Map) -> Map {
        let mut out = Map::zeros(self.b, self.h, self.w, self.c + o.c);
        for b in 0..self.b {
            for y in 0..self.h {
                for x in 0..self.w {
                    for c in 0..self.c {
                        out.set(b, y, x, c, self.at(b, y, x, c));
                    }
                    for c in 0..o.c {
                        out.set(b, y, x, self.c + c, o.at(b, y, x, c));
                    }
                }
            }
        }
        out
    }
}

/// Parameter lookup by dotted prefix.
#[derive(Clone)]
pub struct P<'a> {
    pub store: &'a ParamStore,
    pub prefix: String,
}

impl<'a> P<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, prefix: String::new() }
    }

    pub fn sub(&self, name: &str) -> P<'a> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        P { store: self.store, prefix }
    }

    pub fn t(&self, name: &str) -> &'a Tensor {
        let key = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.get(&key).unwrap_or_else(|| panic!("missing parameter {key}"))
    }

    pub fn v(&self, name: &str) -> &'a [f64] {
        self.t(name).data()
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `out[o] = b[o] + Σ_i v[i] · W[i, o]` with `W: [cin, cout]`.
pub fn linear(v: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(v.len(), cin);
    let mut out = vec![0.0; cout];
    for o in 0..cout {
        let mut s = b.map(|b| b.data()[o]).unwrap_or(0.0);
        for i in 0..cin {
            s += v[i] * w.data()[i * cout + o];
        }
        out[o] = s;
    }
    out
}

pub fn linear_p(v: &[f64], p: &P<'_>, name: &str) -> Vec<f64> {
    linear(v, p.t(&format!("w_{name}")), Some(p.t(&format!("b_{name}"))))
}

pub fn layer_norm(v: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    let s = (var + LN_EPS).sqrt();
    v.iter().enumerate().map(|(i, x)| (x - mu) / s * w[i] + b[i]).collect()
}

pub fn norm_map(m: &Map, p: &P<'_>, name: &str) -> Map {
    let (w, b) = (p.v(&format!("{name}_w")), p.v(&format!("{name}_b")));
    m.map_pixels(m.c, |v| layer_norm(v, w, b))
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    Zero,
    Reflect,
}

fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// 3×3 (or k×k) convolution with `k/2` padding and the given stride.
/// `W: [k, k, cin, cout]`.
pub fn conv(m: &Map, w: &Tensor, b: &Tensor, stride: usize, pad: Pad) -> Map {
    let (k, cin, cout) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, m.c);
    let r = (k / 2) as isize;
    let oh = (m.h + 2 * (k / 2) - k) / stride + 1;
    let ow = (m.w + 2 * (k / 2) - k) / stride + 1;
    let mut out = Map::zeros(m.b, oh, ow, cout);
    for bi in 0..m.b {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..cout {
                    let mut s = b.data()[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - r;
                            let ix = (ox * stride + kx) as isize - r;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < m.h && (ix as usize) < m.w;
                            let (y, x) = match (inside, pad) {
                                (true, _) => (iy as usize, ix as usize),
                                (false, Pad::Zero) => continue,
                                (false, Pad::Reflect) => (mirror(iy, m.h), mirror(ix, m.w)),
                            };
                            for i in 0..cin {
                                s += m.at(bi, y, x, i) * w.data()[((ky * k + kx) * cin + i) * cout + o];
                            }
                        }
                    }
                    out.set(bi, oy, ox, o, s);
                }
            }
        }
    }
    out
}

pub fn conv_p(m: &Map, p: &P<'_>, name: &str, stride: usize, pad: Pad) -> Map {
    conv(m, p.t(&format!("w_{name}")), p.t(&format!("b_{name}")), stride, pad)
}

/// Zero-padded depthwise 3×3. `W: [3, 3, c]`.
pub fn depthwise(m: &Map, w: &Tensor, b: &Tensor) -> Map {
    let mut out = Map::zeros(m.b, m.h, m.w, m.c);
    for bi in 0..m.b {
        for y in 0..m.h {
            for x in 0..m.w {
                for c in 0..m.c {
                    let mut s = b.data()[c];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy as usize >= m.h || ix as usize >= m.w {
                                continue;
                            }
                            s += m.at(bi, iy as usize, ix as usize, c) * w.data()[(ky * 3 + kx) * m.c + c];
                        }
                    }
                    out.set(bi, y, x, c, s);
                }
            }
        }
    }
    out
}

/// Transposed multi-head attention. Returns the output map and, per batch
/// and head, the `d × d` attention matrices.
pub fn channel_attention(q_src: &Map, kv_src: &Map, p: &P<'_>, heads: usize) -> (Map, Vec<Vec<Vec<f64>>>) {
    let c = q_src.c;
    let d = c / heads;
    let n = q_src.h * q_src.w;
    let temp = p.v("temperature");
    let q = q_src.map_pixels(c, |v| linear_p(v, p, "q"));
    let k = kv_src.map_pixels(c, |v| linear_p(v, p, "k"));
    let v = kv_src.map_pixels(c, |v| linear_p(v, p, "v"));
    let mut mixed = Map::zeros(q_src.b, q_src.h, q_src.w, c);
    let mut mats = Vec::new();
    for b in 0..q_src.b {
        let col = |m: &Map, ch: usize| -> Vec<f64> {
            (0..n).map(|pos| m.at(b, pos / q_src.w, pos % q_src.w, ch)).collect()
        };
        let unit = |x: Vec<f64>| {
            let s = (x.iter().map(|a| a * a).sum::<f64>() + NORM_EPS).sqrt();
            x.into_iter().map(|a| a / s).collect::<Vec<_>>()
        };
        for hd in 0..heads {
            let qs: Vec<Vec<f64>> = (0..d).map(|i| unit(col(&q, hd * d + i))).collect();
            let ks: Vec<Vec<f64>> = (0..d).map(|j| unit(col(&k, hd * d + j))).collect();
            let mut mat = Vec::new();
            for i in 0..d {
                let logits: Vec<f64> =
                    (0..d).map(|j| temp[hd] * qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>()).collect();
                let a = softmax(&logits);
                for pos in 0..n {
                    let (y, x) = (pos / q_src.w, pos % q_src.w);
                    let s: f64 = (0..d).map(|j| a[j] * v.at(b, y, x, hd * d + j)).sum();
                    mixed.set(b, y, x, hd * d + i, s);
                }
                mat.push(a);
            }
            mats.push(mat);
        }
    }
    (mixed.map_pixels(c, |v| linear_p(v, p, "out")), mats)
}

pub fn tsa(x: &Map, p: &P<'_>, heads: usize) -> Map {
    channel_attention(x, x, p, heads).0
}

pub fn gfn(x: &Map, p: &P<'_>) -> Map {
    let hidden = p.t("w_out").shape()[0];
    let t = x.map_pixels(2 * hidden, |v| linear_p(v, p, "in"));
    let t = depthwise(&t, p.t("w_dw"), p.t("b_dw"));
    let gated = t.map_pixels(hidden, |v| (0..hidden).map(|i| gelu(v[i]) * v[hidden + i]).collect());
    gated.map_pixels(x.c, |v| linear_p(v, p, "out"))
}

/// Six modulation vectors (gate_attn, gate_ffn, scale_attn, shift_attn,
/// scale_ffn, shift_ffn) for one batch item's tokens `[N, C_p]`.
pub fn dea(z: &[Vec<f64>], p: &P<'_>) -> [Vec<f64>; 6] {
    let cp = z[0].len();
    let pooled: Vec<f64> = (0..cp).map(|k| z.iter().map(|r| r[k]).sum::<f64>() / z.len() as f64).collect();
    let adapted: Vec<f64> = linear_p(&pooled, p, "adapt").into_iter().map(silu).collect();
    let e = linear(&adapted, p.t("w_linear"), Some(p.t("b_linear")));
    let c = e.len() / 6;
    let part = |i: usize, off: f64| e[i * c..(i + 1) * c].iter().map(|v| v + off).collect::<Vec<_>>();
    [part(0, 1.0), part(1, 1.0), part(2, 1.0), part(3, 0.0), part(4, 1.0), part(5, 0.0)]
}

fn modulate(m: &Map, b: usize, scale: &[f64], shift: &[f64], out: &mut Map) {
    for y in 0..m.h {
        for x in 0..m.w {
            for c in 0..m.c {
                out.set(b, y, x, c, m.at(b, y, x, c) * scale[c] + shift[c]);
            }
        }
    }
}

/// Degradation-aware block for `z: [B][N][C_p]`.
pub fn dat_block(x: &Map, z: &[Vec<Vec<f64>>], p: &P<'_>, heads: usize) -> Map {
    let mods: Vec<[Vec<f64>; 6]> = z.iter().map(|zb| dea(zb, &p.sub("dea"))).collect();
    let n1 = norm_map(x, p, "norm1");
    let mut m1 = n1.clone();
    for (b, m) in mods.iter().enumerate() {
        modulate(&n1, b, &m[2], &m[3], &mut m1);
    }
    let attn = tsa(&m1, &p.sub("tsa"), heads);
    let mut xt = x.clone();
    for b in 0..x.b {
        for y in 0..x.h {
            for xx in 0..x.w {
                for c in 0..x.c {
                    xt.set(b, y, xx, c, mods[b][0][c] * attn.at(b, y, xx, c) + x.at(b, y, xx, c));
                }
            }
        }
    }
    let n2 = norm_map(&xt, p, "norm2");
    let mut m2 = n2.clone();
    for (b, m) in mods.iter().enumerate() {
        modulate(&n2, b, &m[4], &m[5], &mut m2);
    }
    let f = gfn(&m2, &p.sub("gfn"));
    let mut out = xt.clone();
    for b in 0..x.b {
        for y in 0..x.h {
            for xx in 0..x.w {
                for c in 0..x.c {
                    out.set(b, y, xx, c, mods[b][1][c] * f.at(b, y, xx, c) + xt.at(b, y, xx, c));
                }
            }
        }
    }
    out
}

/// `tokens: [B][N][C_text]` → `[B][N][C]`.
pub fn text_projection(tokens: &[Vec<Vec<f64>>], p: &P<'_>) -> Vec<Vec<Vec<f64>>> {
    tokens
        .iter()
        .map(|tb| {
            tb.iter()
                .map(|t| {
                    let h: Vec<f64> = linear_p(t, p, "l1").into_iter().map(gelu).collect();
                    linear_p(&h, p, "l2")
                })
                .collect()
        })
        .collect()
}

/// Pixel-to-token attention. Returns the output and, per batch, the
/// `[HW][N]` attention rows.
pub fn reference_attention(x: &Map, tokens: &[Vec<Vec<f64>>], p: &P<'_>) -> (Map, Vec<Vec<Vec<f64>>>) {
    let c = x.c;
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = Map::zeros(x.b, x.h, x.w, c);
    let mut all = Vec::new();
    for b in 0..x.b {
        let ks: Vec<Vec<f64>> = tokens[b].iter().map(|t| linear(t, p.t("w_k"), None)).collect();
        let vs: Vec<Vec<f64>> = tokens[b].iter().map(|t| linear(t, p.t("w_v"), None)).collect();
        let mut rows = Vec::new();
        for y in 0..x.h {
            for xx in 0..x.w {
                let q = linear(&x.pixel(b, y, xx), p.t("w_q"), None);
                let logits: Vec<f64> = ks.iter().map(|k| scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>()).collect();
                let a = softmax(&logits);
                for ch in 0..c {
                    out.set(b, y, xx, ch, a.iter().zip(&vs).map(|(w, v)| w * v[ch]).sum());
                }
                rows.push(a);
            }
        }
        all.push(rows);
    }
    (out, all)
}

pub fn cat_block(x: &Map, e_c: &[Vec<Vec<f64>>], p: &P<'_>, heads: usize) -> Map {
    let xt = tsa(&norm_map(x, p, "norm1"), &p.sub("tsa"), heads).add(x);
    let tokens = text_projection(e_c, &p.sub("text"));
    let xh = reference_attention(&xt, &tokens, &p.sub("ra")).0.add(&xt);
    gfn(&norm_map(&xh, p, "norm2"), &p.sub("gfn"))
}

/// Local reference attention with the similarity map. `spatial` selects
/// the softmax over positions instead of channels.
pub fn lra(f: &Map, r: &Map, p: &P<'_>, spatial: bool) -> (Map, Map) {
    let embed = |m: &Map| {
        let t = conv_p(m, p, "1", 1, Pad::Zero);
        let t = Map { d: t.d.iter().map(|&v| relu(v)).collect(), ..t };
        conv_p(&t, p, "2", 1, Pad::Zero)
    };
    let (fj, fk) = (embed(f), embed(r));
    let logits = conv_p(&fj.add(&fk), p, "a", 1, Pad::Zero);
    let mut sim = Map::zeros(f.b, f.h, f.w, f.c);
    if spatial {
        for b in 0..f.b {
            for c in 0..f.c {
                let v: Vec<f64> = (0..f.h * f.w).map(|i| logits.at(b, i / f.w, i % f.w, c)).collect();
                for (i, s) in softmax(&v).into_iter().enumerate() {
                    sim.set(b, i / f.w, i % f.w, c, s);
                }
            }
        }
    } else {
        sim = logits.map_pixels(f.c, softmax);
    }
    let mut out = fj.clone();
    for i in 0..out.d.len() {
        out.d[i] = fj.d[i] + sim.d[i] * fk.d[i];
    }
    (out, sim)
}

/// Reflect-padded 3×3 projection of a `[B, H, W, 3]` reference.
pub fn phi(reference: &Map, p: &P<'_>) -> Map {
    conv_p(reference, p, "phi", 1, Pad::Reflect)
}

/// Reference block after `φ`.
pub fn rbt_fusion(x: &Map, f_ref: &Map, p: &P<'_>, heads: usize, spatial: bool) -> Map {
    let xt = tsa(&norm_map(x, p, "norm1"), &p.sub("tsa"), heads).add(x);
    let half = x.c / 2;
    let local = lra(&xt.channels(0, half), &f_ref.channels(0, half), &p.sub("lra"), spatial).0;
    let global = channel_attention(&xt.channels(half, half), &f_ref.channels(half, half), &p.sub("gra"), heads).0;
    let fused = local.concat(&global).map_pixels(x.c, |v| linear_p(v, p, "theta"));
    let xh = fused.add(&xt);
    gfn(&norm_map(&xh, p, "norm2"), &p.sub("gfn")).add(&xh)
}

pub fn rbt_block(x: &Map, reference: &Map, p: &P<'_>, heads: usize) -> Map {
    rbt_fusion(x, &phi(reference, p), p, heads, false)
}

/// Residual CNN image encoder: `[B, H, W, 3]` → `[B][C_p]`.
pub fn encode_image(img: &Map, p: &P<'_>) -> Vec<Vec<f64>> {
    let mut x = conv_p(img, p, "stem", 1, Pad::Reflect);
    for i in 0..4 {
        let blk = p.sub(&format!("res{i}"));
        let t = conv_p(&x, &blk, "1", 1, Pad::Reflect);
        let t = Map { d: t.d.iter().map(|&v| relu(v)).collect(), ..t };
        let t = conv_p(&t, &blk, "2", 1, Pad::Reflect);
        x = x.add(&t);
        if i < 3 {
            x = conv_p(&x, p, &format!("down{i}"), 2, Pad::Reflect);
        }
    }
    (0..x.b)
        .map(|b| {
            let n = (x.h * x.w) as f64;
            let pooled: Vec<f64> =
                (0..x.c).map(|c| (0..x.h).flat_map(|y| (0..x.w).map(move |xx| (y, xx))).map(|(y, xx)| x.at(b, y, xx, c)).sum::<f64>() / n).collect();
            linear_p(&pooled, p, "head")
        })
        .collect()
}

fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k.iter().map(|kj| scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()).collect();
            let a = softmax(&logits);
            (0..v[0].len()).map(|c| a.iter().zip(v).map(|(w, vj)| w * vj[c]).sum()).collect()
        })
        .collect()
}

/// Query self-attention on the learnable queries, split into heads.
pub fn query_self_attention(queries: &[Vec<f64>], p: &P<'_>, heads: usize) -> Vec<Vec<f64>> {
    let c = queries[0].len();
    let d = c / heads;
    let q: Vec<Vec<f64>> = queries.iter().map(|r| linear_p(r, p, "q")).collect();
    let k: Vec<Vec<f64>> = queries.iter().map(|r| linear_p(r, p, "k")).collect();
    let v: Vec<Vec<f64>> = queries.iter().map(|r| linear_p(r, p, "v")).collect();
    let mut mixed = vec![vec![0.0; c]; queries.len()];
    for h in 0..heads {
        let cut = |m: &Vec<Vec<f64>>| m.iter().map(|r| r[h * d..(h + 1) * d].to_vec()).collect::<Vec<_>>();
        let o = attend(&cut(&q), &cut(&k), &cut(&v), 1.0 / (d as f64).sqrt());
        for (i, row) in o.into_iter().enumerate() {
            mixed[i][h * d..(h + 1) * d].copy_from_slice(&row);
        }
    }
    mixed.iter().map(|r| linear_p(r, p, "out")).collect()
}

/// Refined degradation tokens for one item: `e_d: [N][C_text]`,
/// `i_d: [C_p]` → `[N̂][C_p]`. Also returns the image readout.
pub fn refine(e_d: &[Vec<f64>], i_d: &[f64], p: &P<'_>, heads: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let qt = p.t("queries");
    let (nq, cp) = (qt.shape()[0], qt.shape()[1]);
    let queries: Vec<Vec<f64>> = (0..nq).map(|i| qt.data()[i * cp..(i + 1) * cp].to_vec()).collect();
    let refined = query_self_attention(&queries, &p.sub("sa"), heads);
    let q: Vec<Vec<f64>> = refined.iter().map(|r| linear(r, p.t("w_qp"), None)).collect();
    let text: Vec<Vec<f64>> = e_d.iter().map(|t| linear_p(t, p, "e_proj")).collect();
    let kt: Vec<Vec<f64>> = text.iter().map(|t| linear(t, p.t("w_kd"), None)).collect();
    let vt: Vec<Vec<f64>> = text.iter().map(|t| linear(t, p.t("w_vd"), None)).collect();
    let scale = 1.0 / (cp as f64).sqrt();
    let z_text = attend(&q, &kt, &vt, scale);
    let ki = vec![linear(i_d, p.t("w_ki"), None)];
    let vi = vec![linear(i_d, p.t("w_vi"), None)];
    let z_image = attend(&q, &ki, &vi, scale);
    let ffn = p.sub("ffn");
    let z = z_text
        .iter()
        .zip(&z_image)
        .map(|(a, b)| {
            let x: Vec<f64> = a.iter().zip(b).map(|(u, v)| u + v).collect();
            let h = layer_norm(&x, ffn.v("norm_w"), ffn.v("norm_b"));
            let h: Vec<f64> = linear_p(&h, &ffn, "1").into_iter().map(gelu).collect();
            let h = linear_p(&h, &ffn, "2");
            x.iter().zip(&h).map(|(u, v)| u + v).collect()
        })
        .collect();
    (z, z_image)
}

/// `[B, N, C]` tensor → nested rows.
pub fn rows3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (b, n, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..b).map(|bi| (0..n).map(|i| t.data()[(bi * n + i) * c..(bi * n + i + 1) * c].to_vec()).collect()).collect()
}

pub fn random_store(build: impl FnOnce(&mut lmdir_core::params::ParamBuilder<'_, ChaCha8Rng>), seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    build(&mut lmdir_core::params::ParamBuilder::new(&mut store, &mut r));
    store
}

/// Replaces every tensor with fresh draws (including the zero-initialized
/// and unit-initialized ones) so no parameter sits at a special value.
pub fn randomize(store: &mut ParamStore, seed: u64, std: f64) {
    let mut r = rng(seed);
    for (_, t) in store.iter_mut() {
        let n = t.len();
        let shape = t.shape().to_vec();
        let data: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0) * std * 1.7).collect();
        *t = Tensor::new(shape, data);
    }
}

/// Compares taped gradients of every parameter tensor and every input
/// against five-point finite differences of a random contraction.
pub fn check_grads(store: &ParamStore, inputs: &[(&str, Tensor)], f: &dyn Fn(&Graph, &Scope<'_>, &[Var]) -> Var) {
    let worst = grad_error(store, inputs, f);
    assert!(worst.rel < GRAD_TOL, "{worst}");
}

/// Largest scored mismatch between taped and central-difference gradients.
#[derive(Clone, Debug, Default)]
pub struct GradError {
    pub rel: f64,
    pub at: String,
    pub checked: usize,
}

impl std::fmt::Display for GradError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "max rel {:.2e} at {} over {} entries", self.rel, self.at, self.checked)
    }
}

pub fn grad_error(store: &ParamStore, inputs: &[(&str, Tensor)], f: &dyn Fn(&Graph, &Scope<'_>, &[Var]) -> Var) -> GradError {
    let g = Graph::new();
    let bound = store.bind(&g);
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let out = f(&g, &bound.scope(), &vars);
    let n = out.value().len() as f64;
    let probe = Tensor::randn(out.shape().to_vec(), 1.0 / n.sqrt(), &mut rng(99));
    let grads = g.backward(&g.weighted_sum(&out, &probe));

    let contract = |s: &ParamStore, xs: &[Tensor]| {
        let g = Graph::inference();
        let b = s.bind_frozen(&g);
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let o = f(&g, &b.scope(), &vs);
        o.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut worst = GradError::default();
    let mut compare = |name: &str, analytic: &Tensor, numeric: &Tensor| {
        for (i, (&a, &nu)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let mag = a.abs().max(nu.abs());
            if mag <= MAGNITUDE_FLOOR {
                continue;
            }
            worst.checked += 1;
            let rel = (a - nu).abs() / mag;
            if rel >= worst.rel {
                worst.rel = rel;
                worst.at = format!("{name}[{i}] (analytic {a:e}, numeric {nu:e})");
            }
        }
    };

    let xs: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    for name in store.names().cloned().collect::<Vec<_>>() {
        let analytic = grads.get_or_zeros(bound.var(&name).unwrap());
        let mut eval = |t: &[Tensor]| {
            let mut s = store.clone();
            *s.get_mut(&name).unwrap() = t[0].clone();
            contract(&s, &xs)
        };
        let numeric = numeric_grad_adaptive(&mut eval, &[store.expect(&name).clone()], 0, &ADAPTIVE_STEPS);
        compare(&name, &analytic, &numeric);
    }
    for (k, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&vars[k]);
        let mut eval = |t: &[Tensor]| contract(store, t);
        let numeric = numeric_grad_adaptive(&mut eval, &xs, k, &ADAPTIVE_STEPS);
        compare(name, &analytic, &numeric);
    }
    assert!(worst.checked > 0, "no gradient entries above the magnitude floor");
    worst
}

/// Direct SSIM: explicit 2-D Gaussian window over every valid position.
pub fn ssim_reference(y: &[f64], g: &[f64], h: usize, w: usize, ch: usize, range: f64) -> f64 {
    let k: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let ks: f64 = k.iter().sum();
    let win: Vec<Vec<f64>> = (0..11).map(|i| (0..11).map(|j| k[i] * k[j] / (ks * ks)).collect()).collect();
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut total = 0.0;
    for c in 0..ch {
        let px = |src: &[f64], yy: usize, xx: usize| src[(yy * w + xx) * ch + c];
        let mut sum = 0.0;
        let mut count = 0;
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let (a, b) = (px(y, oy + i, ox + j), px(g, oy + i, ox + j));
                        let wt = win[i][j];
                        ma += wt * a;
                        mb += wt * b;
                        aa += wt * a * a;
                        bb += wt * b * b;
                        ab += wt * a * b;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / ch as f64
}

/// Fixture providers with a small reference image.
pub fn fixture_pipeline() -> lmdir_core::priors::PriorPipeline {
    let config = lmdir_core::priors::ProviderConfig { reference_size: 64, ..Default::default() };
    lmdir_core::priors::PriorPipeline::from_config(config).expect("fixture config is valid")
}

/// Smooth random image in `[0, 1]`.
#[allow(clippy::approx_constant)]
pub fn test_image(h: usize, w: usize, seed: u64) -> lmdir_core::TensorImage {
    let mut r = rng(seed);
    let phase: Vec<f64> = (0..6).map(|_| r.random_range(0.0..6.28)).collect();
    lmdir_core::TensorImage::from_fn(h, w, |y, x, c| {
        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
        (0.5 + 0.35 * (6.0 * fy + phase[c]).sin() * (4.0 * fx + phase[c + 3]).cos()) as f32
    })
}
