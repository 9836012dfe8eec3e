//! Closed-form constants for the Softmax-Power score and empirical checks of
//! the bounds built on them.
//!
//! * `L_γ = γ` for `γ ≥ 1`, `γ·C^(1−γ)` for `0 < γ < 1`: Lipschitz modulus of
//!   `u ↦ (max u)^γ` on the simplex in the ℓ∞ norm.
//! * `γ` is admissible for a backbone with input-Jacobian norm `L_z` and
//!   logit bound `B` when `L_z · (1/B) · L_γ ≤ 1`.
//! * The softmax Jacobian `diag(p) − ppᵀ` has spectral norm at most 1/2.
//! * Adding `μ·(g − s)²` raises a smoothness constant `L` to `L + 2μG²`,
//!   where `G` bounds `‖∇θ g‖`.
//!
//! Every verifier draws trial `t` from its own ChaCha stream `t` under the
//! report's seed, so serial and parallel runs agree exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::losses::{LossMode, LossSpec, SyncConfig};
use crate::network::{backward, SelectiveModel};
use crate::scores::{ProbVector, ScoreKind};

/// Default tolerance for the sampled Lipschitz check.
pub const LIPSCHITZ_TOL: f64 = 1e-12;

/// Relative slack allowed on the sampled smoothness bounds.
pub const SMOOTHNESS_SLACK: f64 = 0.05;

/// Step size of the random parameter perturbations in the smoothness probes.
/// Larger steps start to straddle ReLU and argmax kinks, where the gradient
/// jumps and difference ratios stop reflecting curvature.
pub const PROBE_RADIUS: f64 = 1e-4;

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 1000;

/// Outcome of one verification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    #[serde(rename = "name")]
    pub check_name: String,
    #[serde(rename = "trials")]
    pub n_trials: usize,
    #[serde(rename = "bound")]
    pub bound_value: f64,
    /// Largest observed excess over the bound; `<= 0` means no violation.
    pub max_violation: f64,
    pub passed: bool,
    pub seed: u64,
}

/// Hypotheses of the global smoothness bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessInputs {
    /// Hessian bound of the baseline objective.
    pub l: f64,
    pub mu: f64,
    /// Bound on the selector's parameter gradient.
    pub g_star: f64,
    /// Logit bound.
    pub b: f64,
    /// Backbone input-Jacobian norm.
    pub l_z: f64,
}

impl SmoothnessInputs {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("L", self.l), ("mu", self.mu), ("G", self.g_star)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("B", self.b), ("L_z", self.l_z)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("gamma must be > 0, got {gamma}")))
    }
}

pub fn lipschitz_modulus(gamma: f64, classes: usize) -> Result<f64> {
    check_gamma(gamma)?;
    if classes < 2 {
        return Err(invalid(format!("need at least 2 classes, got {classes}")));
    }
    Ok(if gamma >= 1.0 {
        gamma
    } else {
        gamma * (classes as f64).powf(1.0 - gamma)
    })
}

/// Whether `L_γ ≤ B / L_z`.
///
/// The `γ < 1` branch `γ·C^(1−γ)` is not monotone in `γ` (it peaks at
/// `γ = 1/ln C`), so the inequality is evaluated directly for each `γ`.
pub fn check_gamma_admissible(gamma: f64, b: f64, l_z: f64, classes: usize) -> Result<bool> {
    if !(b > 0.0 && b.is_finite()) || !(l_z > 0.0 && l_z.is_finite()) {
        return Err(invalid(format!("B and L_z must be > 0, got B={b}, L_z={l_z}")));
    }
    Ok(lipschitz_modulus(gamma, classes)? <= b / l_z)
}

pub fn smoothness_constant(inp: &SmoothnessInputs) -> Result<f64> {
    inp.validate()?;
    Ok(inp.l + 2.0 * inp.mu * inp.g_star * inp.g_star)
}

/// Result of a power iteration that may have run out of iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerEstimate {
    /// `‖Av‖` at the last iterate; a lower bound on the top eigenvalue.
    pub value: f64,
    pub converged: bool,
}

/// Largest eigenvalue of a symmetric positive semi-definite operator.
///
/// Starts from the normalized all-ones vector. If that vector lies in the
/// operator's null space the iteration restarts from the ramp `(1, 2, …, n)`.
pub fn power_iteration<F>(dim: usize, apply: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let est = power_iteration_estimate(dim, apply);
    if est.converged {
        Ok(est.value)
    } else {
        Err(Error::NoConvergence { iterations: POWER_MAX_ITER })
    }
}

/// [`power_iteration`] that reports the last estimate instead of failing.
pub fn power_iteration_estimate<F>(dim: usize, apply: F) -> PowerEstimate
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if dim == 0 {
        return PowerEstimate { value: 0.0, converged: true };
    }
    let ones = vec![1.0; dim];
    let first = power_from(&ones, &apply);
    if first.value > 0.0 {
        return first;
    }
    let ramp: Vec<f64> = (1..=dim).map(|i| i as f64).collect();
    power_from(&ramp, &apply)
}

fn power_from<F>(start: &[f64], apply: &F) -> PowerEstimate
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut v = normalized(start);
    let mut estimate = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let w = apply(&v);
        let norm = l2(&w);
        if norm == 0.0 {
            return PowerEstimate { value: 0.0, converged: true };
        }
        if (norm - estimate).abs() <= POWER_TOL * norm.max(1e-300) {
            return PowerEstimate { value: norm, converged: true };
        }
        estimate = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    PowerEstimate { value: estimate, converged: false }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = l2(v);
    v.iter().map(|x| x / n).collect()
}

/// Spectral norm of the softmax Jacobian `diag(p) − ppᵀ` at `p`.
pub fn softmax_jacobian_norm(p: &ProbVector) -> Result<f64> {
    let est = softmax_jacobian_estimate(p);
    if est.converged {
        Ok(est.value)
    } else {
        Err(Error::NoConvergence { iterations: POWER_MAX_ITER })
    }
}

/// Largest singular value of `diag(p) − ppᵀ` from power iteration on `JᵀJ`.
pub fn softmax_jacobian_estimate(p: &ProbVector) -> PowerEstimate {
    let (k, _) = p.argmax();
    let p = p.as_slice();
    // v − ⟨p,v⟩ is formed relative to the dominant entry: when p_k ≈ 1 the
    // direct form cancels and the iteration stalls on round-off.
    let jac = |v: &[f64]| -> Vec<f64> {
        let shift: f64 = p.iter().zip(v).map(|(pj, vj)| pj * (vj - v[k])).sum();
        p.iter().zip(v).map(|(pi, vi)| pi * ((vi - v[k]) - shift)).collect()
    };
    let est = power_iteration_estimate(p.len(), |v| jac(&jac(v)));
    PowerEstimate { value: est.value.sqrt(), ..est }
}

pub fn sample_simplex(rng: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..classes).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// RNG for trial `trial` of a run seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn smp_raw(p: &[f64], gamma: f64) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max).powf(gamma)
}

/// Slack `|s(u) − s(v)| − L·‖u − v‖∞` for one pair; positive means violated.
pub fn lipschitz_excess(u: &[f64], v: &[f64], gamma: f64, modulus: f64) -> f64 {
    let dist = u
        .iter()
        .zip(v)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (smp_raw(u, gamma) - smp_raw(v, gamma)).abs() - modulus * dist
}

pub fn verify_lipschitz(gamma: f64, classes: usize, n_pairs: usize, seed: u64) -> Result<TheoryReport> {
    let modulus = lipschitz_modulus(gamma, classes)?;
    verify_lipschitz_with_modulus(gamma, classes, n_pairs, seed, modulus)
}

/// [`verify_lipschitz`] against an arbitrary modulus, e.g. a deliberately
/// wrong one to confirm the check can fail.
pub fn verify_lipschitz_with_modulus(
    gamma: f64,
    classes: usize,
    n_pairs: usize,
    seed: u64,
    modulus: f64,
) -> Result<TheoryReport> {
    check_gamma(gamma)?;
    if n_pairs == 0 {
        return Err(invalid("n_pairs must be >= 1"));
    }
    let worst = (0..n_pairs as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let u = sample_simplex(&mut rng, classes);
            let v = sample_simplex(&mut rng, classes);
            lipschitz_excess(&u, &v, gamma, modulus)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    Ok(TheoryReport {
        check_name: format!("lipschitz gamma={gamma} C={classes}"),
        n_trials: n_pairs,
        bound_value: modulus,
        max_violation: worst,
        passed: worst <= LIPSCHITZ_TOL,
        seed,
    })
}

/// Samples `n` random logit vectors per trial and checks
/// `‖diag(p) − ppᵀ‖₂ ≤ 1/2`.
pub fn verify_softmax_jacobian(classes: usize, n: usize, logit_scale: f64, seed: u64) -> Result<TheoryReport> {
    if classes < 2 || n == 0 {
        return Err(invalid("need classes >= 2 and n >= 1"));
    }
    let norms = (0..n as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let z: Vec<f64> = (0..classes)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    logit_scale * n
                })
                .collect();
            let p = crate::network::softmax(&z)?;
            let est = softmax_jacobian_estimate(&p);
            // An unconverged iterate is only a lower bound. J ≼ diag(p) gives a
            // certified upper bound of max p for those trials.
            Ok(if est.converged { est.value } else { p.argmax().1 })
        })
        .collect::<Result<Vec<f64>>>()?;
    let worst = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 0.5;
    Ok(TheoryReport {
        check_name: format!("softmax_jacobian C={classes}"),
        n_trials: n,
        bound_value: 0.5,
        max_violation: worst,
        passed: worst <= 1e-9,
        seed,
    })
}

pub fn estimate_backbone_lipschitz(model: &SelectiveModel, inputs: &[&[f64]]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(invalid("empty batch"));
    }
    let rows = model.arch.f_outputs();
    let d = model.arch.input_dim;
    let mut best: f64 = 0.0;
    for x in inputs {
        let jac = model.input_jacobian(x)?;
        // top eigenvalue of JᵀJ is the squared spectral norm of J
        let top = power_iteration(d, |v| {
            let jv: Vec<f64> = jac.chunks_exact(d).map(|r| dot(r, v)).collect();
            let mut out = vec![0.0; d];
            for (r, s) in jac.chunks_exact(d).zip(&jv).take(rows) {
                for (o, w) in out.iter_mut().zip(r) {
                    *o += w * s;
                }
            }
            out
        })?;
        best = best.max(top.sqrt());
    }
    Ok(best)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn flat_grad(model: &SelectiveModel, inputs: &[&[f64]], labels: &[usize], spec: &LossSpec) -> Result<Vec<f64>> {
    Ok(backward(model, inputs, labels, spec)?.1 .0.to_flat())
}

fn max_selection_grad(model: &SelectiveModel, inputs: &[&[f64]]) -> Result<f64> {
    let mut best: f64 = 0.0;
    for x in inputs {
        best = best.max(model.selection_gradient(x)?.0.l2_norm());
    }
    Ok(best)
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = l2(&v);
    v.into_iter().map(|x| radius * x / norm).collect()
}

/// A probe pair: `θ₁` is a random point at distance `radius` from the
/// model's parameters, `θ₂` a random point at distance `radius` from `θ₁`.
fn probe_pair(model: &SelectiveModel, seed: u64, t: u64, radius: f64) -> Result<(SelectiveModel, SelectiveModel, f64)> {
    let mut rng = trial_rng(seed, t);
    let theta = model.params.to_flat();
    let n = theta.len();
    let off = random_direction(&mut rng, n, radius);
    let step = random_direction(&mut rng, n, radius);
    let t1: Vec<f64> = theta.iter().zip(&off).map(|(a, b)| a + b).collect();
    let t2: Vec<f64> = t1.iter().zip(&step).map(|(a, b)| a + b).collect();
    let mut m1 = model.clone();
    let mut m2 = model.clone();
    m1.params.set_flat(&t1)?;
    m2.params.set_flat(&t2)?;
    let dist = diff_norm(&t1, &t2);
    Ok((m1, m2, dist))
}

struct Probe {
    ratio: f64,
    base_ratio: f64,
    g_norm: f64,
}

/// Sampled check of the global smoothness bound `L̂ + 2μĜ²`.
///
/// For each probe pair the gradient-difference ratio
/// `‖∇L(θ₁) − ∇L(θ₂)‖ / ‖θ₁ − θ₂‖` is measured for the configured objective
/// and for the same objective with `μ = 0`. `L̂` is the largest `μ = 0`
/// ratio, `Ĝ` the largest `‖∇θ g(x)‖` over the batch at every probe point.
/// The check passes if no probe exceeds the bound by more than
/// [`SMOOTHNESS_SLACK`] relative.
pub fn verify_smoothness(
    model: &SelectiveModel,
    inputs: &[&[f64]],
    labels: &[usize],
    cfg: &SyncConfig,
    n_probe: usize,
    radius: f64,
    seed: u64,
) -> Result<TheoryReport> {
    if cfg.mode != LossMode::Sync {
        return Err(invalid("smoothness check needs loss mode `sync`"));
    }
    let full = LossSpec::Config(*cfg);
    let base = LossSpec::Config(SyncConfig { mu: 0.0, ..*cfg });
    let probes = run_probes(model, inputs, n_probe, radius, seed, |m1, m2, dist| {
        let ratio = diff_norm(
            &flat_grad(m1, inputs, labels, &full)?,
            &flat_grad(m2, inputs, labels, &full)?,
        ) / dist;
        let base_ratio = diff_norm(
            &flat_grad(m1, inputs, labels, &base)?,
            &flat_grad(m2, inputs, labels, &base)?,
        ) / dist;
        Ok((ratio, base_ratio))
    })?;
    let l_hat = probes.iter().map(|p| p.base_ratio).fold(0.0, f64::max);
    let g_hat = probes.iter().map(|p| p.g_norm).fold(0.0, f64::max);
    let bound = l_hat + 2.0 * cfg.mu * g_hat * g_hat;
    Ok(report_probes("smoothness", &probes, bound, seed))
}

/// Sampled check of `2μĜ²` for the sync term alone.
pub fn verify_sync_smoothness(
    model: &SelectiveModel,
    inputs: &[&[f64]],
    mu: f64,
    score: ScoreKind,
    n_probe: usize,
    radius: f64,
    seed: u64,
) -> Result<TheoryReport> {
    let spec = LossSpec::SyncTermOnly { mu, score };
    let labels = vec![0; inputs.len()];
    let probes = run_probes(model, inputs, n_probe, radius, seed, |m1, m2, dist| {
        let ratio = diff_norm(
            &flat_grad(m1, inputs, &labels, &spec)?,
            &flat_grad(m2, inputs, &labels, &spec)?,
        ) / dist;
        Ok((ratio, 0.0))
    })?;
    let g_hat = probes.iter().map(|p| p.g_norm).fold(0.0, f64::max);
    let bound = 2.0 * mu * g_hat * g_hat;
    Ok(report_probes(&format!("sync_smoothness {score}"), &probes, bound, seed))
}

fn run_probes<F>(
    model: &SelectiveModel,
    inputs: &[&[f64]],
    n_probe: usize,
    radius: f64,
    seed: u64,
    measure: F,
) -> Result<Vec<Probe>>
where
    F: Fn(&SelectiveModel, &SelectiveModel, f64) -> Result<(f64, f64)> + Sync,
{
    if n_probe == 0 {
        return Err(invalid("n_probe must be >= 1"));
    }
    if inputs.is_empty() {
        return Err(invalid("empty batch"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(invalid(format!("probe radius must be > 0, got {radius}")));
    }
    (0..n_probe as u64)
        .into_par_iter()
        .map(|t| {
            let (m1, m2, dist) = probe_pair(model, seed, t, radius)?;
            let (ratio, base_ratio) = measure(&m1, &m2, dist)?;
            let g_norm = max_selection_grad(&m1, inputs)?.max(max_selection_grad(&m2, inputs)?);
            Ok(Probe { ratio, base_ratio, g_norm })
        })
        .collect()
}

fn report_probes(name: &str, probes: &[Probe], bound: f64, seed: u64) -> TheoryReport {
    let allowed = (1.0 + SMOOTHNESS_SLACK) * bound;
    let worst = probes
        .iter()
        .map(|p| p.ratio - allowed)
        .fold(f64::NEG_INFINITY, f64::max);
    TheoryReport {
        check_name: name.to_string(),
        n_trials: probes.len(),
        bound_value: bound,
        max_violation: worst,
        passed: worst <= 0.0,
        seed,
    }
}

/// Score kinds and class counts exercised by [`verify_suite`].
pub const SUITE_GAMMAS: [f64; 3] = [0.5, 1.0, 2.5];
pub const SUITE_CLASSES: [usize; 3] = [2, 5, 100];
pub const SUITE_JACOBIAN_CLASSES: [usize; 3] = [2, 10, 100];

/// Every check in one run, in a fixed order.
///
/// `halve_modulus` runs the Lipschitz checks against `L_γ/2`, which must
/// fail; it exists to show the suite is sensitive.
pub fn verify_suite(seed: u64, halve_modulus: bool) -> Result<Vec<TheoryReport>> {
    let mut out = Vec::new();
    for &gamma in &SUITE_GAMMAS {
        for &c in &SUITE_CLASSES {
            let mut modulus = lipschitz_modulus(gamma, c)?;
            if halve_modulus {
                modulus /= 2.0;
            }
            out.push(verify_lipschitz_with_modulus(gamma, c, 100_000, seed, modulus)?);
        }
    }
    for &c in &SUITE_JACOBIAN_CLASSES {
        out.push(verify_softmax_jacobian(c, 10_000, 5.0, seed)?);
    }
    let (b, l_z) = (10.0, 4.0);
    let admits = check_gamma_admissible(2.5, b, l_z, 100)?;
    let rejects = !check_gamma_admissible(2.6, b, l_z, 100)?;
    out.push(TheoryReport {
        check_name: "gamma_admissible".into(),
        n_trials: 2,
        bound_value: b / l_z,
        max_violation: if admits && rejects { 0.0 } else { 1.0 },
        passed: admits && rejects,
        seed,
    });

    let model = crate::network::init_model(2, &[8], 3, 8, crate::network::HeadMode::Sn, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Vec<f64>> = (0..16)
        .map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let labels: Vec<usize> = (0..xs.len()).map(|i| i % 3).collect();
    let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    for score in [ScoreKind::Sr, ScoreKind::Smp(0.5), ScoreKind::Smp(2.5), ScoreKind::NegEntropy] {
        out.push(verify_sync_smoothness(&model, &inputs, 1.0, score, 1000, PROBE_RADIUS, seed)?);
    }
    let cfg = SyncConfig::default();
    out.push(verify_smoothness(&model, &inputs, &labels, &cfg, 200, PROBE_RADIUS, seed)?);
    Ok(out)
}
