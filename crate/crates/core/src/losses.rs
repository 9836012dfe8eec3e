//! Training objectives for the three loss modes.
//!
//! * `Sn`:   `α·(R + λ·pen) + (1−α)·aux`
//! * `Sync`: `α·(R + λ·pen + μ·sync) + (1−α)·aux`
//! * `Dg`:   mean of `−ln(p_y·o + p_abstain)` over a (C+1)-way softmax
//!
//! `R` is the empirical selective risk weighted by the selection head,
//! `pen` the coverage penalty on the batch-mean of `g`, `aux` the
//! auxiliary-head cross-entropy and `sync` the mean squared gap between `g`
//! and a confidence score of the prediction head's softmax. The sync term is
//! differentiated through both `g` and the softmax.

use crate::error::{invalid, Error, Result};
use crate::network::{softmax_raw, softmax_vjp, HeadMode, HeadOutputs};
use crate::scores::{self, ProbVector, ScoreKind, PROB_FLOOR};

/// Added to the coverage mass in the selective-risk denominator.
pub const RISK_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossMode {
    Sn,
    Dg,
    Sync,
}

impl LossMode {
    pub fn head_mode(self) -> HeadMode {
        match self {
            LossMode::Dg => HeadMode::Dg,
            LossMode::Sn | LossMode::Sync => HeadMode::Sn,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            LossMode::Sn => "sn",
            LossMode::Dg => "dg",
            LossMode::Sync => "sync",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltyMode {
    /// `max(0, c̄ − ĉ)²`: only under-coverage is penalized.
    Hinge,
    /// `(c̄ − ĉ)²`.
    Symmetric,
}

impl PenaltyMode {
    pub fn tag(self) -> &'static str {
        match self {
            PenaltyMode::Hinge => "hinge",
            PenaltyMode::Symmetric => "symmetric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncConfig {
    pub target_coverage: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub mu: f64,
    pub score: ScoreKind,
    pub penalty: PenaltyMode,
    pub odds: f64,
    pub mode: LossMode,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            target_coverage: 0.7,
            lambda: 6.0,
            alpha: 0.5,
            mu: 1.0,
            score: ScoreKind::Smp(0.5),
            penalty: PenaltyMode::Hinge,
            odds: 2.0,
            mode: LossMode::Sync,
        }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.target_coverage;
        if !(c > 0.0 && c <= 1.0) {
            return Err(invalid(format!("target coverage must be in (0, 1], got {c}")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(invalid(format!("mu must be >= 0, got {}", self.mu)));
        }
        self.score.validate()?;
        if self.mode == LossMode::Dg && !(self.odds > 1.0 && self.odds.is_finite()) {
            return Err(invalid(format!("odds must be > 1, got {}", self.odds)));
        }
        Ok(())
    }
}

/// Parts of a batch objective, reported for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLossBreakdown {
    pub total: f64,
    pub selective_risk: f64,
    pub coverage_penalty: f64,
    pub sync_term: f64,
    pub aux_loss: f64,
    pub empirical_coverage: f64,
}

/// Which objective `backward` differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    Config(SyncConfig),
    /// `μ·sync` alone, with risk, penalty and auxiliary terms removed.
    SyncTermOnly { mu: f64, score: ScoreKind },
}

impl From<SyncConfig> for LossSpec {
    fn from(cfg: SyncConfig) -> Self {
        LossSpec::Config(cfg)
    }
}

/// Gradient of a batch objective with respect to one sample's head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub dz: Vec<f64>,
    /// With respect to the sigmoid output `g`, not its pre-activation.
    pub dg: f64,
    pub dh: Vec<f64>,
}

pub fn empirical_selective_risk(per_sample_loss: &[f64], g: &[f64]) -> Result<f64> {
    if per_sample_loss.len() != g.len() {
        return Err(Error::DimensionMismatch { expected: per_sample_loss.len(), got: g.len() });
    }
    if g.is_empty() {
        return Err(invalid("empty batch"));
    }
    let (weighted, mass) = risk_sums(per_sample_loss, g);
    Ok(weighted / (mass + RISK_EPS))
}

fn risk_sums(loss: &[f64], g: &[f64]) -> (f64, f64) {
    let weighted = loss.iter().zip(g).map(|(l, g)| l * g).sum();
    let mass = g.iter().sum();
    (weighted, mass)
}

pub fn coverage_penalty(target: f64, coverage: f64, mode: PenaltyMode) -> f64 {
    let gap = match mode {
        PenaltyMode::Hinge => (target - coverage).max(0.0),
        PenaltyMode::Symmetric => target - coverage,
    };
    gap * gap
}

/// Derivative of [`coverage_penalty`] with respect to the coverage.
fn coverage_penalty_grad(target: f64, coverage: f64, mode: PenaltyMode) -> f64 {
    let gap = match mode {
        PenaltyMode::Hinge => (target - coverage).max(0.0),
        PenaltyMode::Symmetric => target - coverage,
    };
    -2.0 * gap
}

/// Cross-entropy `−ln p_y` with `p_y` clamped to the log floor.
pub fn cross_entropy(p: &[f64], label: usize) -> f64 {
    -p[label].max(PROB_FLOOR).ln()
}

/// `(loss, dloss/dlogits)` for cross-entropy of `softmax(logits)`.
fn cross_entropy_logits(logits: &[f64], label: usize, want_grad: bool) -> (f64, Vec<f64>) {
    let p = softmax_raw(logits);
    let loss = cross_entropy(&p, label);
    if !want_grad {
        return (loss, Vec::new());
    }
    if p[label] > PROB_FLOOR {
        let mut d = p;
        d[label] -= 1.0;
        (loss, d)
    } else {
        (loss, vec![0.0; logits.len()])
    }
}

pub fn aux_loss(h_logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_batch(h_logits.len(), labels.len())?;
    let mut sum = 0.0;
    for (h, &y) in h_logits.iter().zip(labels) {
        check_label(y, h.len())?;
        sum += cross_entropy(&softmax_raw(h), y);
    }
    Ok(sum / labels.len() as f64)
}

pub fn sync_term(g: &[f64], p: &[ProbVector], kind: ScoreKind) -> Result<f64> {
    check_batch(g.len(), p.len())?;
    let kind = kind.validate()?;
    let mut sum = 0.0;
    for (&gi, pi) in g.iter().zip(p) {
        let d = gi - scores::score(pi, kind)?;
        sum += d * d;
    }
    Ok(sum / g.len() as f64)
}

/// Deep Gamblers loss for one sample; `p_ext` has C+1 coordinates, the last
/// being the abstain class.
pub fn dg_loss(p_ext: &ProbVector, label: usize, odds: f64) -> Result<f64> {
    let c = p_ext.len() - 1;
    check_label(label, c)?;
    if !(odds > 1.0 && odds.is_finite()) {
        return Err(invalid(format!("odds must be > 1, got {odds}")));
    }
    let p = p_ext.as_slice();
    Ok(-(p[label] * odds + p[c]).max(PROB_FLOOR).ln())
}

/// The selective part `R + λ·pen` alone.
pub fn sn_selective_loss(
    outputs: &[HeadOutputs],
    labels: &[usize],
    cfg: &SyncConfig,
) -> Result<BatchLossBreakdown> {
    check_batch(outputs.len(), labels.len())?;
    cfg.validate()?;
    let mut losses = Vec::with_capacity(outputs.len());
    for (o, &y) in outputs.iter().zip(labels) {
        check_label(y, o.p.len())?;
        losses.push(cross_entropy(o.p.as_slice(), y));
    }
    let g: Vec<f64> = outputs.iter().map(|o| o.g).collect();
    let risk = empirical_selective_risk(&losses, &g)?;
    let coverage = g.iter().sum::<f64>() / g.len() as f64;
    let pen = coverage_penalty(cfg.target_coverage, coverage, cfg.penalty);
    Ok(BatchLossBreakdown {
        total: risk + cfg.lambda * pen,
        selective_risk: risk,
        coverage_penalty: pen,
        sync_term: 0.0,
        aux_loss: 0.0,
        empirical_coverage: coverage,
    })
}

/// The full objective selected by `cfg.mode`.
pub fn objective(
    outputs: &[HeadOutputs],
    labels: &[usize],
    cfg: &SyncConfig,
) -> Result<BatchLossBreakdown> {
    let mode = cfg.mode.head_mode();
    Ok(evaluate(outputs, labels, &LossSpec::Config(*cfg), mode, false)?.0)
}

/// The SYNC objective; `cfg.mode` must be [`LossMode::Sync`].
pub fn sync_loss(
    outputs: &[HeadOutputs],
    labels: &[usize],
    cfg: &SyncConfig,
) -> Result<BatchLossBreakdown> {
    if cfg.mode != LossMode::Sync {
        return Err(invalid("sync_loss requires loss mode `sync`"));
    }
    objective(outputs, labels, cfg)
}

fn check_batch(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(invalid("empty batch"));
    }
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, got: b });
    }
    Ok(())
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Objective value and, when `want_grad`, per-sample head gradients.
pub(crate) fn evaluate(
    outputs: &[HeadOutputs],
    labels: &[usize],
    spec: &LossSpec,
    head_mode: HeadMode,
    want_grad: bool,
) -> Result<(BatchLossBreakdown, Vec<HeadGrad>)> {
    check_batch(outputs.len(), labels.len())?;
    for (o, &y) in outputs.iter().zip(labels) {
        check_label(y, o.p.len())?;
    }
    let expected = match spec {
        LossSpec::Config(cfg) => {
            cfg.validate()?;
            cfg.mode.head_mode()
        }
        LossSpec::SyncTermOnly { mu, score } => {
            if !(*mu >= 0.0 && mu.is_finite()) {
                return Err(invalid(format!("mu must be >= 0, got {mu}")));
            }
            score.validate()?;
            HeadMode::Sn
        }
    };
    if expected != head_mode {
        return Err(invalid(format!(
            "loss needs a {expected:?}-mode model, got {head_mode:?}"
        )));
    }
    match *spec {
        LossSpec::Config(cfg) if cfg.mode == LossMode::Dg => {
            Ok(evaluate_dg(outputs, labels, cfg.odds, want_grad))
        }
        LossSpec::Config(cfg) => Ok(evaluate_selective(outputs, labels, &cfg, want_grad)),
        LossSpec::SyncTermOnly { mu, score } => {
            Ok(evaluate_sync_only(outputs, mu, score, want_grad))
        }
    }
}

fn zero_grad(o: &HeadOutputs) -> HeadGrad {
    HeadGrad {
        dz: vec![0.0; o.z.len()],
        dg: 0.0,
        dh: vec![0.0; o.h_logits.len()],
    }
}

/// Sync residuals `g − s` and `ds/dz` per sample.
fn sync_parts(outputs: &[HeadOutputs], kind: ScoreKind, want_grad: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut resid = Vec::with_capacity(outputs.len());
    let mut ds_dz = Vec::new();
    for o in outputs {
        let p = o.p.as_slice();
        let (s, ds_dp) = scores::score_with_grad(p, kind);
        resid.push(o.g - s);
        if want_grad {
            ds_dz.push(softmax_vjp(p, &ds_dp));
        }
    }
    (resid, ds_dz)
}

fn evaluate_selective(
    outputs: &[HeadOutputs],
    labels: &[usize],
    cfg: &SyncConfig,
    want_grad: bool,
) -> (BatchLossBreakdown, Vec<HeadGrad>) {
    let b = outputs.len() as f64;
    let with_sync = cfg.mode == LossMode::Sync;

    let mut ce = Vec::with_capacity(outputs.len());
    let mut dce = Vec::new();
    let mut aux_sum = 0.0;
    let mut daux = Vec::new();
    for (o, &y) in outputs.iter().zip(labels) {
        let (l, d) = cross_entropy_logits(&o.z, y, want_grad);
        ce.push(l);
        dce.push(d);
        let (l, d) = cross_entropy_logits(&o.h_logits, y, want_grad);
        aux_sum += l;
        daux.push(d);
    }
    let g: Vec<f64> = outputs.iter().map(|o| o.g).collect();
    let (weighted, mass) = risk_sums(&ce, &g);
    let denom = mass + RISK_EPS;
    let risk = weighted / denom;
    let coverage = mass / b;
    let pen = coverage_penalty(cfg.target_coverage, coverage, cfg.penalty);
    let aux = aux_sum / b;

    let (resid, ds_dz) = if with_sync {
        sync_parts(outputs, cfg.score, want_grad)
    } else {
        (Vec::new(), Vec::new())
    };
    let sync = if with_sync {
        resid.iter().map(|r| r * r).sum::<f64>() / b
    } else {
        0.0
    };
    let use_sync = with_sync && cfg.mu != 0.0;

    let mut selective = risk + cfg.lambda * pen;
    if use_sync {
        selective += cfg.mu * sync;
    }
    let alpha = cfg.alpha;
    let total = alpha * selective + (1.0 - alpha) * aux;
    let breakdown = BatchLossBreakdown {
        total,
        selective_risk: risk,
        coverage_penalty: pen,
        sync_term: sync,
        aux_loss: aux,
        empirical_coverage: coverage,
    };
    if !want_grad {
        return (breakdown, Vec::new());
    }

    let dpen = cfg.lambda * coverage_penalty_grad(cfg.target_coverage, coverage, cfg.penalty) / b;
    let mut grads = Vec::with_capacity(outputs.len());
    for i in 0..outputs.len() {
        let w_ce = alpha * g[i] / denom;
        let mut dz: Vec<f64> = dce[i].iter().map(|d| w_ce * d).collect();
        let mut dg = (ce[i] - risk) / denom + dpen;
        if use_sync {
            let k = 2.0 * cfg.mu * resid[i] / b;
            dg += k;
            for (a, s) in dz.iter_mut().zip(&ds_dz[i]) {
                *a -= alpha * k * s;
            }
        }
        let w_aux = (1.0 - alpha) / b;
        grads.push(HeadGrad {
            dz,
            dg: alpha * dg,
            dh: daux[i].iter().map(|d| w_aux * d).collect(),
        });
    }
    (breakdown, grads)
}

fn evaluate_sync_only(
    outputs: &[HeadOutputs],
    mu: f64,
    kind: ScoreKind,
    want_grad: bool,
) -> (BatchLossBreakdown, Vec<HeadGrad>) {
    let b = outputs.len() as f64;
    let (resid, ds_dz) = sync_parts(outputs, kind, want_grad);
    let sync = resid.iter().map(|r| r * r).sum::<f64>() / b;
    let breakdown = BatchLossBreakdown {
        total: mu * sync,
        sync_term: sync,
        empirical_coverage: outputs.iter().map(|o| o.g).sum::<f64>() / b,
        ..Default::default()
    };
    if !want_grad {
        return (breakdown, Vec::new());
    }
    let grads = outputs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let k = 2.0 * mu * resid[i] / b;
            HeadGrad {
                dz: ds_dz[i].iter().map(|s| -k * s).collect(),
                dg: k,
                dh: vec![0.0; o.h_logits.len()],
            }
        })
        .collect();
    (breakdown, grads)
}

fn evaluate_dg(
    outputs: &[HeadOutputs],
    labels: &[usize],
    odds: f64,
    want_grad: bool,
) -> (BatchLossBreakdown, Vec<HeadGrad>) {
    let b = outputs.len() as f64;
    let mut sum = 0.0;
    let mut kept = 0.0;
    let mut grads = Vec::new();
    for (o, &y) in outputs.iter().zip(labels) {
        let p = softmax_raw(&o.z);
        let c = p.len() - 1;
        let q = p[y] * odds + p[c];
        sum += -q.max(PROB_FLOOR).ln();
        kept += 1.0 - p[c];
        if want_grad {
            let mut g = zero_grad(o);
            if q > PROB_FLOOR {
                let mut dp = vec![0.0; p.len()];
                dp[y] = -odds / (q * b);
                dp[c] = -1.0 / (q * b);
                g.dz = softmax_vjp(&p, &dp);
            }
            grads.push(g);
        }
    }
    let breakdown = BatchLossBreakdown {
        total: sum / b,
        empirical_coverage: kept / b,
        ..Default::default()
    };
    (breakdown, grads)
}
