//! Finite-difference verification of analytic gradients.
//!
//! The numeric side only evaluates forward passes on an inference graph, so
//! it shares nothing with the backward closures it checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Step for the five-point central stencil.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Entries whose gradient magnitude is at or below this are not scored.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "max rel err {:.3e} over {} entries", self.max_rel_error, self.checked)?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " (worst {}[{}]: analytic {:.6e}, numeric {:.6e})",
                w.input, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Five-point central difference of `f` with respect to every entry of `inputs[which]`.
pub fn numeric_grad(
    f: &mut dyn FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    step: f64,
) -> Tensor {
    let mut work = inputs.to_vec();
    let n = work[which].len();
    let mut grad = vec![0.0; n];
    for (i, g) in grad.iter_mut().enumerate() {
        let x0 = work[which].data()[i];
        let mut at = |dx: f64, work: &mut Vec<Tensor>| {
            work[which].data_mut()[i] = x0 + dx;
            f(work)
        };
        let f_p1 = at(step, &mut work);
        let f_m1 = at(-step, &mut work);
        let f_p2 = at(2.0 * step, &mut work);
        let f_m2 = at(-2.0 * step, &mut work);
        work[which].data_mut()[i] = x0;
        *g = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * step);
    }
    Tensor::new(inputs[which].shape().to_vec(), grad)
}

/// Steps tried by [`numeric_grad_adaptive`], largest first.
pub const ADAPTIVE_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Initial step of the Ridders tableau.
pub const RIDDERS_STEP: f64 = 0.05;

/// Ridders' extrapolated central difference for one entry, starting at
/// step `h0`. Returns the estimate and its error estimate.
pub fn ridders_entry(f: &mut dyn FnMut(f64) -> f64, h0: f64) -> (f64, f64) {
    const CON: f64 = 1.4;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let con2 = CON * CON;
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut h = h0;
    a[0][0] = (f(h) - f(-h)) / (2.0 * h);
    let (mut best, mut err) = (a[0][0], f64::INFINITY);
    for i in 1..NTAB {
        h /= CON;
        a[0][i] = (f(h) - f(-h)) / (2.0 * h);
        let mut fac = con2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= con2;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    (best, err)
}

/// Per entry, the better of two estimates by their own error bounds:
/// Ridders' extrapolation from a large step, which wins on smooth
/// functions, and five-point differences at each of `steps` (largest
/// first), taking the largest step that agrees with the next smaller one.
/// Large steps lose to kinks and small ones to cancellation; neither
/// choice looks at the analytic gradient.
pub fn numeric_grad_adaptive(
    f: &mut dyn FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    steps: &[f64],
) -> Tensor {
    assert!(steps.len() >= 2, "need at least two steps");
    let scale = f(inputs).abs().max(1.0);
    let noise = |h: f64| 64.0 * f64::EPSILON * scale / h;
    let estimates: Vec<Tensor> = steps.iter().map(|&h| numeric_grad(f, inputs, which, h)).collect();
    let mut work = inputs.to_vec();
    let grad = (0..inputs[which].len())
        .map(|i| {
            let d: Vec<f64> = estimates.iter().map(|e| e.data()[i]).collect();
            let gaps: Vec<f64> = d.windows(2).map(|w| (w[0] - w[1]).abs()).collect();
            let agreeing = (0..gaps.len()).find(|&k| gaps[k] <= noise(steps[k + 1]) + 1e-6 * d[k + 1].abs());
            let k = agreeing.unwrap_or_else(|| {
                (0..gaps.len()).fold(0, |best, k| if gaps[k] < gaps[best] { k } else { best })
            });
            let stepped_err = gaps[k].max(noise(steps[k]));

            let x0 = work[which].data()[i];
            let mut along = |dx: f64| {
                work[which].data_mut()[i] = x0 + dx;
                f(&work)
            };
            let (ridders, ridders_err) = ridders_entry(&mut along, RIDDERS_STEP);
            work[which].data_mut()[i] = x0;
            if ridders_err < stepped_err {
                ridders
            } else {
                d[k]
            }
        })
        .collect();
    Tensor::new(inputs[which].shape().to_vec(), grad)
}

/// Checks `build` (which must return any-shaped output) by contracting the
/// output with a fixed random probe and comparing analytic gradients of every
/// named input against finite differences.
pub fn check(
    build: &dyn Fn(&Graph, &[Var]) -> Var,
    inputs: &[(&str, Tensor)],
    step: f64,
    probe_seed: u64,
) -> GradCheckReport {
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| graph.leaf(t.clone())).collect();
    let out = build(&graph, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let scale = 1.0 / (out.value().len() as f64).sqrt();
    let probe = Tensor::randn(out.shape().to_vec(), scale, &mut rng);
    let loss = graph.weighted_sum(&out, &probe);
    let grads = graph.backward(&loss);

    let tensors: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut eval = |ts: &[Tensor]| {
        let g = Graph::inference();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let o = build(&g, &vs);
        o.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (k, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&vars[k]);
        let numeric = numeric_grad(&mut eval, &tensors, k, step);
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let mag = a.abs().max(n.abs());
            if mag <= MAGNITUDE_FLOOR {
                continue;
            }
            report.checked += 1;
            let rel = (a - n).abs() / mag;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst =
                        Some(Mismatch { input: name.to_string(), index: i, analytic: a, numeric: n });
                }
            }
        }
    }
    report
}
