//! Analytic gradients against central finite differences.

mod common;

use common::{finite_difference, gradient_error, random_batch, rows};
use syncsel::losses::{LossMode, LossSpec, PenaltyMode, SyncConfig};
use syncsel::network::{backward, init_model, HeadMode};
use syncsel::scores::ScoreKind;

const SCORES: [ScoreKind; 4] = [
    ScoreKind::Sr,
    ScoreKind::Smp(0.5),
    ScoreKind::Smp(2.5),
    ScoreKind::NegEntropy,
];

fn check(spec: LossSpec, head: HeadMode, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let model = init_model(2, &[8], 3, 8, head, seed).unwrap();
        let (x, y) = random_batch(1000 + seed, 4, 2, 3);
        let x = rows(&x);
        let analytic = backward(&model, &x, &y, &spec).unwrap().1 .0.to_flat();
        let numeric = finite_difference(&model, &x, &y, &spec, 1e-5);
        let (rel, abs) = gradient_error(&analytic, &numeric);
        assert!(rel <= 1e-5, "{spec:?} seed {seed}: relative error {rel:e}");
        assert!(abs <= 1e-8, "{spec:?} seed {seed}: near-zero absolute error {abs:e}");
    }
}

#[test]
fn sn_loss_both_penalties() {
    for penalty in [PenaltyMode::Hinge, PenaltyMode::Symmetric] {
        let cfg = SyncConfig { mode: LossMode::Sn, penalty, target_coverage: 0.9, ..Default::default() };
        check(cfg.into(), HeadMode::Sn, 0..5);
    }
}

#[test]
fn sync_loss_every_score() {
    for score in SCORES {
        let cfg = SyncConfig { score, mu: 1.5, ..Default::default() };
        check(cfg.into(), HeadMode::Sn, 0..5);
    }
}

#[test]
fn dg_loss() {
    let cfg = SyncConfig { mode: LossMode::Dg, odds: 2.2, ..Default::default() };
    check(cfg.into(), HeadMode::Dg, 0..5);
}

#[test]
fn sync_term_alone() {
    for score in SCORES {
        check(LossSpec::SyncTermOnly { mu: 1.0, score }, HeadMode::Sn, 0..3);
    }
}

#[test]
fn zero_mu_matches_sn_bitwise() {
    for seed in 0..10 {
        let model = init_model(2, &[8], 3, 8, HeadMode::Sn, seed).unwrap();
        let (x, y) = random_batch(seed, 6, 2, 3);
        let x = rows(&x);
        let sn = SyncConfig { mode: LossMode::Sn, ..Default::default() };
        let sync = SyncConfig { mu: 0.0, ..Default::default() };
        let (la, ga) = backward(&model, &x, &y, &sn.into()).unwrap();
        let (lb, gb) = backward(&model, &x, &y, &sync.into()).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(ga.0.to_flat()), bits(gb.0.to_flat()));
    }
}

#[test]
fn synchronized_sample_has_no_sync_gradient() {
    // bias the selection head so that g(x) equals the SR score exactly
    let mut model = init_model(2, &[8], 3, 8, HeadMode::Sn, 4).unwrap();
    let x = [0.3, -0.8];
    let out = model.forward(&x).unwrap();
    let target = out.p.argmax().1;
    let pre = (target / (1.0 - target)).ln();
    let current = (out.g / (1.0 - out.g)).ln();
    model.params.g_out.bias[0] += pre - current;
    let out = model.forward(&x).unwrap();
    let resid = out.g - out.p.argmax().1;
    assert!(resid.abs() < 1e-15, "{resid}");

    let spec = LossSpec::SyncTermOnly { mu: 1.0, score: ScoreKind::Sr };
    let (_, grads) = backward(&model, &[&x], &[0], &spec).unwrap();
    let worst = grads.0.to_flat().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e-13, "{worst}");
}
