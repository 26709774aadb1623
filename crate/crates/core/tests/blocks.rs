mod common;

use common::*;
use lmdir_core::autodiff::{Graph, Var};
use lmdir_core::blocks::{self, BlockConfig, SoftmaxAxis};
use lmdir_core::params::{ParamBuilder, ParamStore, Scope};
use lmdir_core::{Error, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-10;

fn eval(store: &ParamStore, f: impl FnOnce(&Graph, &Scope<'_>) -> Var) -> Tensor {
    let g = Graph::inference();
    let bound = store.bind_frozen(&g);
    let out = f(&g, &bound.scope());
    out.value().clone()
}

fn build(seed: u64, init: impl FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>)) -> ParamStore {
    let mut store = random_store(init, seed);
    randomize(&mut store, seed ^ 0x5eed, 0.5);
    store
}

/// Random instance dims `(b, h, w, c, heads)` with `c` even and divisible by heads.
fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize) {
    let heads = [1, 2][r.random_range(0..2)];
    let c = 2 * heads * r.random_range(1..4);
    (r.random_range(1..3), r.random_range(2..6), r.random_range(2..6), c, heads)
}

fn tokens(b: usize, n: usize, c: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(vec![b, n, c], 1.0, r)
}

#[test]
fn channel_attention_matches_oracle() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (b, h, w, c, heads) = dims(&mut r);
        let store = build(seed, |pb| blocks::init_channel_attention(pb, c, heads));
        let q = randn(&[b, h, w, c], 1.0, &mut r);
        let kv = randn(&[b, h, w, c], 1.0, &mut r);
        let g = Graph::inference();
        let bound = store.bind_frozen(&g);
        let out = blocks::channel_attention(&g, &g.constant(q.clone()), &g.constant(kv.clone()), &bound.scope(), heads)
            .unwrap();
        let (want, mats) = channel_attention(&Map::from_tensor(&q), &Map::from_tensor(&kv), &P::new(&store), heads);
        assert!(rel_err(out.out.value().data(), &want.d) < TOL, "seed {seed}");
        let flat: Vec<f64> = mats.into_iter().flatten().flatten().collect();
        assert!(rel_err(out.attention.value().data(), &flat) < TOL, "seed {seed}");
    }
}

#[test]
fn tsa_and_gfn_match_oracle() {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let (b, h, w, c, heads) = dims(&mut r);
        let x = randn(&[b, h, w, c], 1.0, &mut r);
        let store = build(seed, |pb| blocks::init_channel_attention(pb, c, heads));
        let got = eval(&store, |g, p| blocks::tsa(g, &g.constant(x.clone()), p, heads).unwrap());
        assert!(rel_err(got.data(), &tsa(&Map::from_tensor(&x), &P::new(&store), heads).d) < TOL);

        let ratio = [1.0, 2.66, 0.5][seed as usize % 3];
        let store = build(seed, |pb| blocks::init_gfn(pb, c, ratio));
        let got = eval(&store, |g, p| blocks::gfn(g, &g.constant(x.clone()), p).unwrap());
        assert!(rel_err(got.data(), &gfn(&Map::from_tensor(&x), &P::new(&store)).d) < TOL);
    }
}

#[test]
fn dat_block_matches_oracle() {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let (b, h, w, c, heads) = dims(&mut r);
        let cp = r.random_range(2..7);
        let n = r.random_range(1..5);
        let cfg = BlockConfig::new(heads);
        let store = build(seed, |pb| blocks::init_dat_block(pb, c, cp, &cfg));
        let x = randn(&[b, h, w, c], 1.0, &mut r);
        let z = tokens(b, n, cp, &mut r);
        let got = eval(&store, |g, p| {
            blocks::dat_block(g, &g.constant(x.clone()), &g.constant(z.clone()), p, &cfg).unwrap()
        });
        let want = dat_block(&Map::from_tensor(&x), &rows3(&z), &P::new(&store), heads);
        assert!(rel_err(got.data(), &want.d) < TOL, "seed {seed}");
    }
}

#[test]
fn cat_block_matches_oracle() {
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let (b, h, w, c, heads) = dims(&mut r);
        let (n, ct) = (r.random_range(1..6), r.random_range(2..9));
        let cfg = BlockConfig::new(heads);
        let store = build(seed, |pb| blocks::init_cat_block(pb, c, ct, &cfg));
        let x = randn(&[b, h, w, c], 1.0, &mut r);
        let e = tokens(b, n, ct, &mut r);
        let got = eval(&store, |g, p| {
            blocks::cat_block(g, &g.constant(x.clone()), &g.constant(e.clone()), p, &cfg).unwrap()
        });
        let want = cat_block(&Map::from_tensor(&x), &rows3(&e), &P::new(&store), heads);
        assert!(rel_err(got.data(), &want.d) < TOL, "seed {seed}");
    }
}

#[test]
fn reference_attention_matches_oracle() {
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let (b, h, w, c, _) = dims(&mut r);
        let n = r.random_range(1..6);
        let store = build(seed, |pb| blocks::init_reference_attention(pb, c));
        let x = randn(&[b, h, w, c], 1.0, &mut r);
        let t = tokens(b, n, c, &mut r);
        let g = Graph::inference();
        let bound = store.bind_frozen(&g);
        let out = blocks::reference_attention(&g, &g.constant(x.clone()), &g.constant(t.clone()), &bound.scope())
            .unwrap();
        let (want, attn) = reference_attention(&Map::from_tensor(&x), &rows3(&t), &P::new(&store));
        assert!(rel_err(out.out.value().data(), &want.d) < TOL);
        let flat: Vec<f64> = attn.into_iter().flatten().flatten().collect();
        assert_eq!(out.attention.shape(), [b, h * w, n]);
        assert!(rel_err(out.attention.value().data(), &flat) < TOL);
    }
}

#[test]
fn lra_matches_oracle_on_both_axes() {
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let (b, h, w, c, _) = dims(&mut r);
        let store = build(seed, |pb| blocks::init_lra(pb, c));
        let f = randn(&[b, h, w, c], 1.0, &mut r);
        let rf = randn(&[b, h, w, c], 1.0, &mut r);
        for (axis, spatial) in [(SoftmaxAxis::Channel, false), (SoftmaxAxis::Spatial, true)] {
            let g = Graph::inference();
            let bound = store.bind_frozen(&g);
            let out = blocks::lra(&g, &g.constant(f.clone()), &g.constant(rf.clone()), &bound.scope(), axis).unwrap();
            let (want, sim) = lra(&Map::from_tensor(&f), &Map::from_tensor(&rf), &P::new(&store), spatial);
            assert!(rel_err(out.out.value().data(), &want.d) < TOL);
            assert!(rel_err(out.attention.value().data(), &sim.d) < TOL);
        }
    }
}

#[test]
fn rbt_block_matches_oracle() {
    for seed in 0..INSTANCES {
        let mut r = rng(600 + seed);
        let (b, h, w, c, heads) = dims(&mut r);
        // the global branch works on half the channels
        let heads = if (c / 2) % heads == 0 { heads } else { 1 };
        let mut cfg = BlockConfig::new(heads);
        let spatial = seed % 2 == 1;
        if spatial {
            cfg.lra_axis = SoftmaxAxis::Spatial;
        }
        let store = build(seed, |pb| blocks::init_rbt_block(pb, c, &cfg));
        let x = randn(&[b, h, w, c], 1.0, &mut r);
        let reference = Tensor::uniform(vec![b, h, w, 3], 1.0, &mut r);
        let got = eval(&store, |g, p| {
            blocks::rbt_block(g, &g.constant(x.clone()), &g.constant(reference.clone()), p, &cfg).unwrap()
        });
        let f_ref = phi(&Map::from_tensor(&reference), &P::new(&store));
        let want = rbt_fusion(&Map::from_tensor(&x), &f_ref, &P::new(&store), heads, spatial);
        assert!(rel_err(got.data(), &want.d) < TOL, "seed {seed}");
    }
}

#[test]
fn text_projection_and_phi_match_oracle() {
    for seed in 0..INSTANCES {
        let mut r = rng(700 + seed);
        let (b, h, w, c, _) = dims(&mut r);
        let ct = r.random_range(2..9);
        let store = build(seed, |pb| blocks::init_text_projection(pb, ct, c));
        let e = tokens(b, 3, ct, &mut r);
        let got = eval(&store, |g, p| blocks::text_projection(g, &g.constant(e.clone()), p).unwrap());
        let want: Vec<f64> = text_projection(&rows3(&e), &P::new(&store)).into_iter().flatten().flatten().collect();
        assert!(rel_err(got.data(), &want) < TOL);

        let store = build(seed, |pb| pb.conv("phi", 3, 3, c));
        let img = Tensor::uniform(vec![b, h, w, 3], 1.0, &mut r);
        let got = eval(&store, |g, p| blocks::project_reference_map(g, &g.constant(img.clone()), p).unwrap());
        assert!(rel_err(got.data(), &phi(&Map::from_tensor(&img), &P::new(&store)).d) < TOL);
    }
}

#[test]
fn tsa_of_zero_input_is_spatially_constant() {
    let store = build(1, |pb| blocks::init_channel_attention(pb, 4, 2));
    let x = Tensor::zeros(vec![1, 3, 3, 4]);
    let got = eval(&store, |g, p| blocks::tsa(g, &g.constant(x.clone()), p, 2).unwrap());
    // every projection reduces to its bias, so all pixels agree
    let want = tsa(&Map::from_tensor(&x), &P::new(&store), 2);
    assert!(rel_err(got.data(), &want.d) < TOL);
    for px in got.data().chunks(4) {
        assert!(rel_err(px, &got.data()[..4]) < 1e-12);
    }
}

#[test]
fn single_token_reference_attention_broadcasts_its_value() {
    let store = build(2, |pb| blocks::init_reference_attention(pb, 6));
    let mut r = rng(2);
    let x = randn(&[2, 3, 4, 6], 1.0, &mut r);
    let t = tokens(2, 1, 6, &mut r);
    let got = eval(&store, |g, p| {
        blocks::reference_attention(g, &g.constant(x.clone()), &g.constant(t.clone()), p).unwrap().out
    });
    for bi in 0..2 {
        let v = linear(&t.data()[bi * 6..bi * 6 + 6], store.expect("w_v"), None);
        for px in got.data()[bi * 72..(bi + 1) * 72].chunks(6) {
            assert!(rel_err(px, &v) < 1e-12);
        }
    }
}

#[test]
fn reference_attention_ignores_token_order() {
    let store = build(3, |pb| blocks::init_reference_attention(pb, 4));
    let mut r = rng(3);
    let x = randn(&[1, 3, 3, 4], 1.0, &mut r);
    let t = tokens(1, 5, 4, &mut r);
    let perm = [3usize, 0, 4, 2, 1];
    let shuffled = Tensor::new(vec![1, 5, 4], perm.iter().flat_map(|&i| t.data()[i * 4..i * 4 + 4].to_vec()).collect());
    let run = |tok: &Tensor| {
        eval(&store, |g, p| blocks::reference_attention(g, &g.constant(x.clone()), &g.constant(tok.clone()), p).unwrap().out)
    };
    assert!(run(&t).max_abs_diff(&run(&shuffled)) < 1e-12);
}

#[test]
fn lra_with_zero_reference_matches_oracle() {
    let store = build(4, |pb| blocks::init_lra(pb, 4));
    let f = randn(&[1, 4, 4, 4], 1.0, &mut rng(4));
    let zero = Tensor::zeros(vec![1, 4, 4, 4]);
    let out = eval(&store, |g, p| {
        blocks::lra(g, &g.constant(f.clone()), &g.constant(zero.clone()), p, SoftmaxAxis::Channel).unwrap().out
    });
    let (want, _) = lra(&Map::from_tensor(&f), &Map::from_tensor(&zero), &P::new(&store), false);
    assert!(rel_err(out.data(), &want.d) < TOL);
}

#[test]
fn gra_with_itself_equals_tsa() {
    let store = build(5, |pb| blocks::init_channel_attention(pb, 8, 2));
    let x = randn(&[2, 3, 5, 8], 1.0, &mut rng(5));
    let a = eval(&store, |g, p| blocks::tsa(g, &g.constant(x.clone()), p, 2).unwrap());
    let b = eval(&store, |g, p| {
        let v = g.constant(x.clone());
        blocks::gra(g, &v, &v, p, 2).unwrap()
    });
    assert_eq!(a, b);
}

#[test]
fn fresh_dat_block_equals_unconditioned_block() {
    let cfg = BlockConfig::new(2);
    let store = random_store(|pb| blocks::init_dat_block(pb, 8, 5, &cfg), 6);
    let mut r = rng(6);
    let x = randn(&[2, 4, 4, 8], 1.0, &mut r);
    let z = tokens(2, 3, 5, &mut r);
    let dat = eval(&store, |g, p| blocks::dat_block(g, &g.constant(x.clone()), &g.constant(z.clone()), p, &cfg).unwrap());
    let plain = eval(&store, |g, p| blocks::unconditioned_block(g, &g.constant(x.clone()), p, &cfg).unwrap());
    assert_eq!(dat.data(), plain.data());
}

#[test]
fn zero_gates_make_dat_block_identity() {
    let cfg = BlockConfig::new(2);
    let c = 8;
    let mut store = build(7, |pb| blocks::init_dat_block(pb, c, 5, &cfg));
    // gates are 1 + e[0..2c]; force e to -1 there for any input
    *store.get_mut("dea.w_linear").unwrap() = Tensor::zeros(vec![c, 6 * c]);
    let mut b = vec![0.0; 6 * c];
    b[..2 * c].iter_mut().for_each(|v| *v = -1.0);
    *store.get_mut("dea.b_linear").unwrap() = Tensor::new(vec![6 * c], b);
    let mut r = rng(7);
    let x = randn(&[1, 3, 4, c], 1.0, &mut r);
    let z = tokens(1, 2, 5, &mut r);
    let out = eval(&store, |g, p| blocks::dat_block(g, &g.constant(x.clone()), &g.constant(z.clone()), p, &cfg).unwrap());
    assert!(out.max_abs_diff(&x) < 1e-12);
}

#[test]
fn cat_block_with_zero_content_matches_oracle() {
    let cfg = BlockConfig::new(1);
    let store = build(8, |pb| blocks::init_cat_block(pb, 4, 6, &cfg));
    let x = randn(&[1, 3, 3, 4], 1.0, &mut rng(8));
    let e = Tensor::zeros(vec![1, 2, 6]);
    let got = eval(&store, |g, p| blocks::cat_block(g, &g.constant(x.clone()), &g.constant(e.clone()), p, &cfg).unwrap());
    let want = cat_block(&Map::from_tensor(&x), &rows3(&e), &P::new(&store), 1);
    assert!(rel_err(got.data(), &want.d) < TOL);
    assert!(got.is_finite());
}

#[test]
fn odd_channel_count_is_rejected() {
    let cfg = BlockConfig::new(1);
    let store = random_store(|pb| blocks::init_rbt_block(pb, 5, &cfg), 9);
    let g = Graph::inference();
    let bound = store.bind_frozen(&g);
    let x = g.constant(Tensor::zeros(vec![1, 4, 4, 5]));
    let reference = g.constant(Tensor::zeros(vec![1, 4, 4, 3]));
    let err = blocks::rbt_block(&g, &x, &reference, &bound.scope(), &cfg).err().unwrap();
    assert!(matches!(err, Error::OddChannelCount(5)));
}

#[test]
fn constant_reference_projects_to_constant_map() {
    let store = build(10, |pb| pb.conv("phi", 3, 3, 6));
    let img = Tensor::new(vec![1, 5, 7, 3], (0..105).map(|i| [0.2, 0.5, 0.9][i % 3]).collect());
    let out = eval(&store, |g, p| blocks::project_reference_map(g, &g.constant(img.clone()), p).unwrap());
    let first = out.data()[..6].to_vec();
    for px in out.data().chunks(6) {
        assert!(rel_err(px, &first) < 1e-12);
    }
}

#[test]
fn shape_errors_are_reported() {
    let cfg = BlockConfig::new(2);
    let store = random_store(|pb| blocks::init_dat_block(pb, 8, 4, &cfg), 11);
    let g = Graph::inference();
    let bound = store.bind_frozen(&g);
    let x = g.constant(Tensor::zeros(vec![2, 4, 4, 8]));
    let wrong_batch = g.constant(Tensor::zeros(vec![1, 2, 4]));
    assert!(matches!(
        blocks::dat_block(&g, &x, &wrong_batch, &bound.scope(), &cfg),
        Err(Error::ShapeMismatch { .. })
    ));
    let wrong_width = g.constant(Tensor::zeros(vec![2, 2, 5]));
    assert!(blocks::dat_block(&g, &x, &wrong_width, &bound.scope(), &cfg).is_err());
}
