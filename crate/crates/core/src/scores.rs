//! Confidence scores computed from a softmax output.
//!
//! Every score maps a point of the probability simplex to `[0, 1]`, with
//! larger values meaning "more confident". Softmax Response is the maximum
//! class probability; Softmax-Power raises it to `gamma`; the entropy score
//! is one minus the entropy normalized by `ln C`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Probabilities below this floor are clamped before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` when validating a [`ProbVector`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex with at least two coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::InvalidSimplex(format!(
                "need at least 2 coordinates, got {}",
                p.len()
            )));
        }
        if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidSimplex(format!("coordinate {bad} outside [0, 1]")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidSimplex(format!("coordinates sum to {sum}")));
        }
        Ok(ProbVector(p))
    }

    /// Wraps a vector already known to lie on the simplex (softmax output).
    pub(crate) fn from_softmax(p: Vec<f64>) -> Self {
        debug_assert!(p.len() >= 2);
        ProbVector(p)
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidSimplex(format!("need at least 2 classes, got {classes}")));
        }
        Ok(ProbVector(vec![1.0 / classes as f64; classes]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest coordinate and its index; ties go to the lowest index.
    pub fn argmax(&self) -> (usize, f64) {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    (best, v[best])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreKind {
    /// Softmax Response: `max p`.
    Sr,
    /// Softmax-Power: `(max p)^gamma`.
    Smp(f64),
    /// `1 - H(p) / ln C`.
    NegEntropy,
}

impl ScoreKind {
    pub fn validate(self) -> Result<Self> {
        match self {
            ScoreKind::Smp(g) if !(g > 0.0 && g.is_finite()) => {
                Err(Error::InvalidArgument(format!("smp exponent must be > 0, got {g}")))
            }
            k => Ok(k),
        }
    }

    /// Config tag: `sr`, `smp` or `negent`.
    pub fn tag(self) -> &'static str {
        match self {
            ScoreKind::Sr => "sr",
            ScoreKind::Smp(_) => "smp",
            ScoreKind::NegEntropy => "negent",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreKind::Smp(g) => write!(f, "smp:{g}"),
            k => f.write_str(k.tag()),
        }
    }
}

/// Parses `sr`, `negent` or `smp:<gamma>`.
impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "sr" => Ok(ScoreKind::Sr),
            "negent" => Ok(ScoreKind::NegEntropy),
            _ => {
                let gamma = s
                    .strip_prefix("smp:")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown score `{s}`")))?;
                let gamma: f64 = gamma
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad smp exponent `{gamma}`")))?;
                ScoreKind::Smp(gamma).validate()
            }
        }
    }
}

pub fn sr_score(p: &ProbVector) -> f64 {
    p.argmax().1
}

pub fn smp_score(p: &ProbVector, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("smp exponent must be > 0, got {gamma}")));
    }
    Ok(sr_score(p).powf(gamma))
}

pub fn neg_entropy_score(p: &ProbVector) -> f64 {
    neg_entropy_raw(p.as_slice())
}

pub fn score(p: &ProbVector, kind: ScoreKind) -> Result<f64> {
    match kind {
        ScoreKind::Sr => Ok(sr_score(p)),
        ScoreKind::Smp(g) => smp_score(p, g),
        ScoreKind::NegEntropy => Ok(neg_entropy_score(p)),
    }
}

fn neg_entropy_raw(p: &[f64]) -> f64 {
    let h: f64 = p.iter().map(|&pi| -pi * pi.max(PROB_FLOOR).ln()).sum();
    (1.0 - h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Score value and its derivative with respect to each coordinate of `p`.
///
/// The max is differentiated by routing the whole gradient to the argmax
/// coordinate (lowest index on ties). `kind` must already be validated.
pub(crate) fn score_with_grad(p: &[f64], kind: ScoreKind) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; p.len()];
    match kind {
        ScoreKind::Sr => {
            let (i, m) = argmax(p);
            grad[i] = 1.0;
            (m, grad)
        }
        ScoreKind::Smp(gamma) => {
            let (i, m) = argmax(p);
            grad[i] = gamma * m.powf(gamma - 1.0);
            (m.powf(gamma), grad)
        }
        ScoreKind::NegEntropy => {
            let ln_c = (p.len() as f64).ln();
            for (g, &pi) in grad.iter_mut().zip(p) {
                // d/dp of p ln(max(p, floor)); the log is constant below the floor
                let d = if pi > PROB_FLOOR { pi.ln() + 1.0 } else { PROB_FLOOR.ln() };
                *g = d / ln_c;
            }
            (neg_entropy_raw(p), grad)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn sr_examples() {
        assert_eq!(sr_score(&pv(&[0.1, 0.6, 0.3])), 0.6);
        assert_eq!(sr_score(&ProbVector::uniform(4).unwrap()), 0.25);
        assert_eq!(sr_score(&pv(&[0.0, 1.0, 0.0])), 1.0);
    }

    #[test]
    fn smp_examples() {
        assert_eq!(smp_score(&pv(&[0.5, 0.3, 0.2]), 2.0).unwrap(), 0.25);
        let p = pv(&[0.2, 0.7, 0.1]);
        assert_eq!(smp_score(&p, 1.0).unwrap(), sr_score(&p));
        assert!((smp_score(&pv(&[0.81, 0.19]), 0.5).unwrap() - 0.9).abs() < 1e-15);
        assert!(smp_score(&p, 0.0).is_err());
        assert!(smp_score(&p, -1.0).is_err());
    }

    #[test]
    fn smp_monotone_in_gamma_below_one() {
        let p = pv(&[0.6, 0.4]);
        let a = smp_score(&p, 0.5).unwrap();
        let b = smp_score(&p, 1.0).unwrap();
        let c = smp_score(&p, 2.5).unwrap();
        assert!(a > b && b > c);
    }

    #[test]
    fn neg_entropy_examples() {
        assert!(neg_entropy_score(&ProbVector::uniform(5).unwrap()).abs() < 1e-12);
        assert_eq!(neg_entropy_score(&pv(&[0.0, 0.0, 1.0])), 1.0);
        let mut prev = f64::INFINITY;
        for k in 1..8 {
            let d = 0.1f64.powi(k);
            let s = neg_entropy_score(&pv(&[0.5 + d, 0.5 - d]));
            assert!(s < prev);
            prev = s;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn dispatch() {
        let p = pv(&[0.25, 0.45, 0.3]);
        assert_eq!(score(&p, ScoreKind::Sr).unwrap(), 0.45);
        assert_eq!(score(&p, ScoreKind::Smp(1.0)).unwrap(), 0.45);
        let u = ProbVector::uniform(3).unwrap();
        assert!(score(&u, ScoreKind::NegEntropy).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_simplex() {
        assert!(ProbVector::new(vec![1.0]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![f64::NAN, 0.5]).is_err());
    }

    #[test]
    fn parse_and_display() {
        assert_eq!("sr".parse::<ScoreKind>().unwrap(), ScoreKind::Sr);
        assert_eq!("negent".parse::<ScoreKind>().unwrap(), ScoreKind::NegEntropy);
        assert_eq!("smp:2.5".parse::<ScoreKind>().unwrap(), ScoreKind::Smp(2.5));
        assert!("smp:0".parse::<ScoreKind>().is_err());
        assert!("entropy".parse::<ScoreKind>().is_err());
        assert_eq!(ScoreKind::Smp(0.5).to_string(), "smp:0.5");
    }

    #[test]
    fn grad_matches_central_difference_off_ties() {
        let p = [0.2, 0.5, 0.3];
        for kind in [ScoreKind::Sr, ScoreKind::Smp(0.5), ScoreKind::Smp(2.5), ScoreKind::NegEntropy] {
            let (_, g) = score_with_grad(&p, kind);
            for i in 0..3 {
                let eps = 1e-6;
                let mut hi = p;
                let mut lo = p;
                hi[i] += eps;
                lo[i] -= eps;
                let fd = (score_with_grad(&hi, kind).0 - score_with_grad(&lo, kind).0) / (2.0 * eps);
                assert!((fd - g[i]).abs() < 1e-7, "{kind} coord {i}: {fd} vs {}", g[i]);
            }
        }
    }
}
