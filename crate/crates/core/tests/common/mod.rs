#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use syncsel::losses::LossSpec;
use syncsel::network::{backward, SelectiveModel};

pub fn random_batch(seed: u64, n: usize, dim: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n)
        .map(|_| (0..dim).map(|_| 1.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect())
        .collect();
    let y = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
    (x, y)
}

pub fn rows(x: &[Vec<f64>]) -> Vec<&[f64]> {
    x.iter().map(|v| v.as_slice()).collect()
}

/// Central-difference gradient of the batch loss, one parameter at a time.
pub fn finite_difference(
    model: &SelectiveModel,
    x: &[&[f64]],
    y: &[usize],
    spec: &LossSpec,
    eps: f64,
) -> Vec<f64> {
    let theta = model.params.to_flat();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(theta.len());
    let mut t = theta.clone();
    for j in 0..theta.len() {
        t[j] = theta[j] + eps;
        probe.params.set_flat(&t).unwrap();
        let hi = backward(&probe, x, y, spec).unwrap().0;
        t[j] = theta[j] - eps;
        probe.params.set_flat(&t).unwrap();
        let lo = backward(&probe, x, y, spec).unwrap().0;
        t[j] = theta[j];
        out.push((hi - lo) / (2.0 * eps));
    }
    out
}

/// Gradient magnitude below which the absolute error bound applies.
pub const NEAR_ZERO: f64 = 1e-3;

/// Largest disagreement, as (relative error over entries of magnitude at
/// least [`NEAR_ZERO`], absolute error over the rest).
pub fn gradient_error(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let mut rel: f64 = 0.0;
    let mut abs: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        if scale < NEAR_ZERO {
            abs = abs.max(diff);
        } else {
            rel = rel.max(diff / scale);
        }
    }
    (rel, abs)
}
