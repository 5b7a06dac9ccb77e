//! Shared test harness: f64 reference ops, finite differences, RNG helpers.

#![allow(dead_code)]

pub mod gradcheck;
pub mod reference;
pub mod reference_net;

use fundus_dqa::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Random tensor with entries uniform in [lo, hi).
pub fn rand_tensor(rng: &mut StdRng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random tensor whose entries stay at least `margin` away from zero, for
/// finite differences across piecewise-linear kinks.
pub fn rand_tensor_off_kink(rng: &mut StdRng, shape: &[usize], margin: f32) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let v: f32 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Central-difference gradients of `f` with respect to every element of
/// every input, computed in f64.
pub fn fd_grads(
    f: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    eps: f64,
) -> Vec<Vec<f64>> {
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let mut g = vec![0.0; inputs[p].len()];
        for i in 0..inputs[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + eps;
            let fp = f(&work);
            work[p][i] = orig - eps;
            let fm = f(&work);
            work[p][i] = orig;
            g[i] = (fp - fm) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative error between an analytic f32 gradient and its numeric
/// f64 estimate. The denominator is floored at 1e-3 so near-zero entries
/// are compared on an absolute scale.
pub fn max_rel_err(analytic: &Tensor, numeric: &[f64]) -> f64 {
    assert_eq!(analytic.numel(), numeric.len());
    analytic
        .data()
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
        })
        .fold(0.0, f64::max)
}

pub fn max_rel_err_slices(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
        })
        .fold(0.0, f64::max)
}
