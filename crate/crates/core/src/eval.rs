//! Threshold calibration, selective metrics, risk–coverage curves and
//! accept/reject breakdowns.
//!
//! A sample is accepted when its selection score is strictly above `τ`.
//! `τ = −∞` accepts everything.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::losses::cross_entropy;
use crate::network::{HeadMode, SelectiveModel};
use crate::scores::{score, ScoreKind};

/// Coverage grid used when none is given: 0.1, 0.2, …, 1.0.
pub fn default_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mechanism {
    /// The model's own selection output.
    Head,
    /// A post-hoc confidence score of the prediction head's softmax.
    Score(ScoreKind),
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mechanism::Head => f.write_str("head"),
            Mechanism::Score(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "head" => Ok(Mechanism::Head),
            other => Ok(Mechanism::Score(other.parse()?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    /// Higher means more confident.
    pub sel_score: f64,
    pub correct: bool,
    pub sample_loss: f64,
    pub region: i32,
}

/// One record per row of `ds`.
///
/// `Head` reads `g(x)` from an SN-mode model and `−p_abstain` from a
/// DG-mode model.
pub fn collect(model: &SelectiveModel, ds: &Dataset, mechanism: Mechanism) -> Result<Vec<EvalRecord>> {
    if ds.dim != model.arch.input_dim {
        return Err(Error::DimensionMismatch { expected: model.arch.input_dim, got: ds.dim });
    }
    let classes = model.num_classes();
    if let Mechanism::Score(k) = mechanism {
        k.validate()?;
    }
    (0..ds.len())
        .map(|i| {
            let y = ds.labels[i];
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            let out = model.forward(ds.row(i))?;
            let sel_score = match (mechanism, model.mode()) {
                (Mechanism::Head, HeadMode::Sn) => out.g,
                (Mechanism::Head, HeadMode::Dg) => {
                    -out.dg_abstain.expect("DG-mode forward reports the abstain probability")
                }
                (Mechanism::Score(kind), _) => score(&out.p, kind)?,
            };
            if !sel_score.is_finite() {
                return Err(Error::NonFinite("selection score"));
            }
            Ok(EvalRecord {
                sel_score,
                correct: out.prediction() == y,
                sample_loss: cross_entropy(out.p.as_slice(), y),
                region: ds.regions[i],
            })
        })
        .collect()
}

/// Record indices by descending score; equal scores keep record order.
fn ranking(records: &[EvalRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[b].sel_score.total_cmp(&records[a].sel_score));
    idx
}

/// `⌈target·N⌉`, guarded against round-off just above an integer.
pub fn accept_count(target: f64, n: usize) -> usize {
    ((target * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

fn check_target(target: f64) -> Result<()> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(invalid(format!("target coverage must be in (0, 1], got {target}")));
    }
    Ok(())
}

/// Threshold accepting the top `⌈target·N⌉` scores.
///
/// `τ` is the midpoint between the last accepted and the first rejected
/// score. When those are tied, every tied record is accepted and the realized
/// coverage overshoots. Returns `−∞` when nothing is left to reject.
pub fn calibrate_threshold(records: &[EvalRecord], target: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(invalid("cannot calibrate on an empty record set"));
    }
    check_target(target)?;
    let mut scores: Vec<f64> = records.iter().map(|r| r.sel_score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    let k = accept_count(target, scores.len());
    let last = scores[k - 1];
    match scores[k..].iter().find(|&&s| s < last) {
        Some(&next) => Ok(next + (last - next) / 2.0),
        None => Ok(f64::NEG_INFINITY),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelectiveMetrics {
    pub coverage: f64,
    /// `None` when nothing is accepted.
    pub risk: Option<f64>,
    pub accuracy: Option<f64>,
    pub accepted: usize,
}

pub fn selective_metrics(records: &[EvalRecord], tau: f64) -> SelectiveMetrics {
    let mut accepted = 0usize;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for r in records.iter().filter(|r| r.sel_score > tau) {
        accepted += 1;
        correct += r.correct as usize;
        loss += r.sample_loss;
    }
    let n = records.len();
    SelectiveMetrics {
        coverage: if n == 0 { 0.0 } else { accepted as f64 / n as f64 },
        risk: (accepted > 0).then(|| loss / accepted as f64),
        accuracy: (accepted > 0).then(|| correct as f64 / accepted as f64),
        accepted,
    }
}

/// Fraction of correct predictions over all records.
pub fn plain_accuracy(records: &[EvalRecord]) -> f64 {
    records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RcPoint {
    /// Realized coverage `k/N`.
    pub coverage: f64,
    pub threshold: f64,
    pub risk: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskCoverageCurve {
    pub points: Vec<RcPoint>,
}

/// One point per grid value, from the exact top `⌈c·N⌉` records.
///
/// Ties at the cut are broken by record order, so every point has exactly the
/// requested size. `threshold` is the [`calibrate_threshold`] value for the
/// same target.
pub fn rc_curve(records: &[EvalRecord], grid: &[f64]) -> Result<RiskCoverageCurve> {
    if records.is_empty() {
        return Err(invalid("cannot build a curve from an empty record set"));
    }
    if grid.is_empty() {
        return Err(invalid("coverage grid is empty"));
    }
    for w in grid.windows(2) {
        if w[1] < w[0] {
            return Err(invalid("coverage grid must be sorted ascending"));
        }
    }
    let order = ranking(records);
    let n = records.len();
    let points = grid
        .iter()
        .map(|&c| {
            check_target(c)?;
            let k = accept_count(c, n);
            let top = &order[..k];
            let correct = top.iter().filter(|&&i| records[i].correct).count();
            let loss: f64 = top.iter().map(|&i| records[i].sample_loss).sum();
            Ok(RcPoint {
                coverage: k as f64 / n as f64,
                threshold: calibrate_threshold(records, c)?,
                risk: loss / k as f64,
                accuracy: correct as f64 / k as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskCoverageCurve { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Confusion {
    pub accept_correct: f64,
    pub accept_incorrect: f64,
    pub reject_correct: f64,
    pub reject_incorrect: f64,
}

impl Confusion {
    pub fn coverage(&self) -> f64 {
        self.accept_correct + self.accept_incorrect
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.accept_correct, self.accept_incorrect, self.reject_correct, self.reject_incorrect]
    }
}

pub fn confusion_table(records: &[EvalRecord], tau: f64) -> Result<Confusion> {
    if records.is_empty() {
        return Err(invalid("empty record set"));
    }
    let mut cells = [0usize; 4];
    for r in records {
        let cell = match (r.sel_score > tau, r.correct) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        cells[cell] += 1;
    }
    let n = records.len() as f64;
    let f = |c: usize| c as f64 / n;
    Ok(Confusion {
        accept_correct: f(cells[0]),
        accept_incorrect: f(cells[1]),
        reject_correct: f(cells[2]),
        reject_incorrect: f(cells[3]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionRejection {
    pub region: i32,
    pub count: usize,
    pub rejected: usize,
    pub rejection_rate: f64,
}

/// Rejection rate per region flag, ascending by region.
pub fn region_rejection(records: &[EvalRecord], tau: f64) -> Vec<RegionRejection> {
    let mut by_region: BTreeMap<i32, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = by_region.entry(r.region).or_default();
        e.0 += 1;
        e.1 += (r.sel_score <= tau) as usize;
    }
    by_region
        .into_iter()
        .map(|(region, (count, rejected))| RegionRejection {
            region,
            count,
            rejected,
            rejection_rate: rejected as f64 / count as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_model;
    use crate::scores::sr_score;

    fn recs(scores: &[f64], correct: &[bool]) -> Vec<EvalRecord> {
        scores
            .iter()
            .zip(correct)
            .map(|(&s, &c)| EvalRecord {
                sel_score: s,
                correct: c,
                sample_loss: if c { 0.1 } else { 2.0 },
                region: 0,
            })
            .collect()
    }

    const S: [f64; 4] = [0.9, 0.8, 0.7, 0.6];
    const C: [bool; 4] = [true, true, false, false];

    #[test]
    fn calibrate_half() {
        let r = recs(&S, &C);
        let tau = calibrate_threshold(&r, 0.5).unwrap();
        assert!(tau > 0.7 && tau < 0.8);
        assert_eq!(selective_metrics(&r, tau).accepted, 2);
    }

    #[test]
    fn calibrate_full_and_ties() {
        let r = recs(&S, &C);
        assert_eq!(calibrate_threshold(&r, 1.0).unwrap(), f64::NEG_INFINITY);
        let tied = recs(&[0.5; 4], &C);
        let tau = calibrate_threshold(&tied, 0.5).unwrap();
        let m = selective_metrics(&tied, tau);
        assert_eq!(m.coverage, 1.0);
        assert!(calibrate_threshold(&[], 0.5).is_err());
        assert!(calibrate_threshold(&r, 0.0).is_err());
        assert!(calibrate_threshold(&r, 1.5).is_err());
    }

    #[test]
    fn metrics_examples() {
        let r = recs(&S, &C);
        let full = selective_metrics(&r, f64::NEG_INFINITY);
        assert_eq!(full.coverage, 1.0);
        assert_eq!(full.accuracy, Some(plain_accuracy(&r)));
        let half = selective_metrics(&r, 0.75);
        assert_eq!((half.coverage, half.accuracy), (0.5, Some(1.0)));
        let none = selective_metrics(&r, 0.95);
        assert_eq!((none.coverage, none.risk, none.accuracy), (0.0, None, None));
    }

    #[test]
    fn curve_examples() {
        let r = recs(&S, &C);
        let one = rc_curve(&r, &[1.0]).unwrap();
        assert_eq!(one.points.len(), 1);
        assert_eq!(one.points[0].accuracy, plain_accuracy(&r));
        let two = rc_curve(&r, &[0.5, 1.0]).unwrap();
        let acc: Vec<f64> = two.points.iter().map(|p| p.accuracy).collect();
        assert_eq!(acc, vec![1.0, 0.5]);
        assert!(rc_curve(&r, &[1.0, 0.5]).is_err());
        assert!(rc_curve(&r, &[]).is_err());
    }

    #[test]
    fn confusion_examples() {
        let r = recs(&[0.9, 0.1], &[true, false]);
        let c = confusion_table(&r, 0.5).unwrap();
        assert_eq!(c.as_array(), [0.5, 0.0, 0.0, 0.5]);
        let all = confusion_table(&r, f64::NEG_INFINITY).unwrap();
        assert_eq!(all.reject_correct + all.reject_incorrect, 0.0);
        assert_eq!(all.coverage(), 1.0);
    }

    #[test]
    fn region_rates() {
        let mut r = recs(&S, &C);
        r[2].region = 1;
        r[3].region = 1;
        let rates = region_rejection(&r, 0.75);
        assert_eq!(rates.len(), 2);
        assert_eq!((rates[0].region, rates[0].rejection_rate), (0, 0.0));
        assert_eq!((rates[1].region, rates[1].rejection_rate), (1, 1.0));
    }

    #[test]
    fn mechanism_parsing() {
        assert_eq!("head".parse::<Mechanism>().unwrap(), Mechanism::Head);
        assert_eq!("sr".parse::<Mechanism>().unwrap(), Mechanism::Score(ScoreKind::Sr));
        assert_eq!("smp:2.5".parse::<Mechanism>().unwrap().to_string(), "smp:2.5");
        assert!("bogus".parse::<Mechanism>().is_err());
    }

    #[test]
    fn collect_uses_the_right_score() {
        let ds = crate::data::gen_blobs(3, 4, 2, 3.0, 0).unwrap();
        let sn = init_model(2, &[6], 3, 4, HeadMode::Sn, 2).unwrap();
        let head = collect(&sn, &ds, Mechanism::Head).unwrap();
        let sr = collect(&sn, &ds, Mechanism::Score(ScoreKind::Sr)).unwrap();
        for (i, (h, s)) in head.iter().zip(&sr).enumerate() {
            let out = sn.forward(ds.row(i)).unwrap();
            assert_eq!(h.sel_score, out.g);
            assert!(h.sel_score > 0.0 && h.sel_score < 1.0);
            assert_eq!(s.sel_score, sr_score(&out.p));
        }
        let dg = init_model(2, &[6], 3, 4, HeadMode::Dg, 2).unwrap();
        let head = collect(&dg, &ds, Mechanism::Head).unwrap();
        for (i, h) in head.iter().enumerate() {
            let out = dg.forward(ds.row(i)).unwrap();
            assert_eq!(h.sel_score, -out.dg_abstain.unwrap());
        }
        let wrong_dim = crate::data::gen_blobs(3, 4, 3, 3.0, 0).unwrap();
        assert!(collect(&sn, &wrong_dim, Mechanism::Head).is_err());
    }
}
