mod common;

use common::*;
use lmdir_core::blocks::{self, BlockConfig, SoftmaxAxis};
use lmdir_core::gradcheck::{self, DEFAULT_STEP};
use lmdir_core::params::{ParamBuilder, ParamStore};
use lmdir_core::Tensor;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SHAPE: [usize; 4] = [1, 4, 4, 8];

fn params(seed: u64, init: impl FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>)) -> ParamStore {
    let mut store = random_store(init, seed);
    randomize(&mut store, seed + 1, 0.4);
    store
}

fn input(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

#[test]
fn tsa_gradients() {
    let store = params(1, |pb| blocks::init_channel_attention(pb, 8, 2));
    check_grads(&store, &[("x", input(1, &SHAPE))], &|g, p, v| blocks::tsa(g, &v[0], p, 2).unwrap());
}

#[test]
fn gra_gradients() {
    let store = params(2, |pb| blocks::init_channel_attention(pb, 8, 2));
    check_grads(&store, &[("x", input(2, &SHAPE)), ("ref", input(3, &SHAPE))], &|g, p, v| {
        blocks::gra(g, &v[0], &v[1], p, 2).unwrap()
    });
}

#[test]
fn gfn_gradients() {
    let store = params(3, |pb| blocks::init_gfn(pb, 8, 2.66));
    check_grads(&store, &[("x", input(4, &SHAPE))], &|g, p, v| blocks::gfn(g, &v[0], p).unwrap());
}

#[test]
fn dat_block_gradients() {
    let cfg = BlockConfig::new(2);
    let store = params(4, |pb| blocks::init_dat_block(pb, 8, 6, &cfg));
    check_grads(&store, &[("x", input(5, &SHAPE)), ("z_d", input(6, &[1, 3, 6]))], &|g, p, v| {
        blocks::dat_block(g, &v[0], &v[1], p, &cfg).unwrap()
    });
}

#[test]
fn cat_block_gradients() {
    let cfg = BlockConfig::new(2);
    let store = params(5, |pb| blocks::init_cat_block(pb, 8, 10, &cfg));
    check_grads(&store, &[("x", input(7, &SHAPE)), ("e_c", input(8, &[1, 4, 10]))], &|g, p, v| {
        blocks::cat_block(g, &v[0], &v[1], p, &cfg).unwrap()
    });
}

#[test]
fn rbt_block_gradients() {
    for axis in [SoftmaxAxis::Channel, SoftmaxAxis::Spatial] {
        let mut cfg = BlockConfig::new(2);
        cfg.lra_axis = axis;
        let store = params(6, |pb| blocks::init_rbt_block(pb, 8, &cfg));
        let reference = Tensor::uniform(vec![1, 4, 4, 3], 1.0, &mut rng(9));
        check_grads(&store, &[("x", input(10, &SHAPE)), ("ref", reference)], &|g, p, v| {
            blocks::rbt_block(g, &v[0], &v[1], p, &cfg).unwrap()
        });
    }
}

#[test]
fn reference_attention_gradients() {
    let store = params(7, |pb| blocks::init_reference_attention(pb, 8));
    check_grads(&store, &[("x", input(11, &SHAPE)), ("tokens", input(12, &[1, 5, 8]))], &|g, p, v| {
        blocks::reference_attention(g, &v[0], &v[1], p).unwrap().out
    });
}

#[test]
fn gradcheck_flags_a_wrong_backward() {
    // the taped pass scales by 2, the finite-difference passes by 1
    let x = input(13, &[2, 3]);
    let report = gradcheck::check(&|g, v| g.mul(&v[0], &v[0]), &[("x", x.clone())], DEFAULT_STEP, 1);
    assert!(report.passes(TOL), "{report}");
    let analytic_only = std::cell::Cell::new(true);
    let report = gradcheck::check(
        &|g, v| {
            let k = if analytic_only.replace(false) { 2.0 } else { 1.0 };
            g.scale(&v[0], k)
        },
        &[("x", x)],
        DEFAULT_STEP,
        1,
    );
    assert!(!report.passes(TOL));
}
