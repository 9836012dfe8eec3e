use syncsel::data::{split_indices, REGION_AMBIGUOUS};
use syncsel::losses::{LossMode, SyncConfig};
use syncsel::network::{init_model, HeadMode};
use syncsel::{gen_ambiguity, gen_blobs, split, train, SplitSpec, TrainConfig};

/// Per-column z-scoring, so that far-apart clusters do not saturate the
/// softmax at initialization.
fn standardize(ds: &mut syncsel::Dataset) {
    let n = ds.len() as f64;
    for j in 0..ds.dim {
        let col = || (0..ds.len()).map(|i| ds.features[i * ds.dim + j]);
        let mean = col().sum::<f64>() / n;
        let sd = (col().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        for i in 0..ds.len() {
            let v = &mut ds.features[i * ds.dim + j];
            *v = (*v - mean) / sd;
        }
    }
}

#[test]
fn separated_blobs_are_learnable() {
    let mut ds = gen_blobs(3, 100, 2, 100.0, 4).unwrap();
    standardize(&mut ds);
    let model = init_model(2, &[], 3, 8, HeadMode::Sn, 0).unwrap();
    let cfg = TrainConfig { epochs: 50, batch_size: 300, lr0: 0.1, ..TrainConfig::default() };
    let run = train(model, &ds, &cfg).unwrap();
    let acc = run.epochs.last().unwrap().train_accuracy;
    assert!(acc >= 0.99, "accuracy {acc}");
}

#[test]
fn ambiguous_labels_are_uniform() {
    // χ² with 3 degrees of freedom; 11.345 is the 0.99 quantile
    for seed in 0..10 {
        let ds = gen_ambiguity(4, 250, 0.2, seed).unwrap();
        let mut counts = [0f64; 4];
        for (y, r) in ds.labels.iter().zip(&ds.regions) {
            if *r == REGION_AMBIGUOUS {
                counts[*y] += 1.0;
            }
        }
        let expected = counts.iter().sum::<f64>() / 4.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        assert!(chi2 < 11.345, "seed {seed}: chi2 {chi2} for {counts:?}");
    }
}

#[test]
fn split_is_stratified_and_covering() {
    let ds = gen_ambiguity(4, 37, 0.1, 2).unwrap();
    let spec = SplitSpec { train_frac: 0.7, cal_frac: 0.15, test_frac: 0.15, seed: 9 };
    let parts = split_indices(&ds, &spec).unwrap();
    let mut seen = vec![0; ds.len()];
    for p in &parts {
        for &i in p {
            seen[i] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
    let (train_set, cal, test) = split(&ds, &spec).unwrap();
    for (part, frac) in [(&train_set, 0.7), (&cal, 0.15), (&test, 0.15)] {
        for (have, total) in part.class_counts().iter().zip(ds.class_counts()) {
            let want = frac * total as f64;
            assert!((*have as f64 - want).abs() <= 1.0, "{have} vs {want}");
        }
    }
}

#[test]
fn default_config_clears_the_bayes_ceiling_margin() {
    let ds = gen_ambiguity(4, 250, 0.2, 0).unwrap();
    let model = init_model(2, &[32, 32], 4, 32, HeadMode::Sn, 0).unwrap();
    let run = train(model, &ds, &TrainConfig::default()).unwrap();
    let acc = run.epochs.last().unwrap().train_accuracy;
    assert!(acc > 1.0 - 0.2 * (1.0 - 0.25) - 0.05, "accuracy {acc}");
}

#[test]
fn zero_mu_training_matches_sn() {
    let ds = gen_ambiguity(3, 40, 0.2, 1).unwrap();
    let base = TrainConfig { epochs: 5, batch_size: 32, seed: 3, ..TrainConfig::default() };
    let sn = TrainConfig { sync: SyncConfig { mode: LossMode::Sn, ..base.sync }, ..base };
    let sync = TrainConfig { sync: SyncConfig { mu: 0.0, ..base.sync }, ..base };
    let m = init_model(2, &[8], 3, 8, HeadMode::Sn, 3).unwrap();
    let a = train(m.clone(), &ds, &sn).unwrap();
    let b = train(m, &ds, &sync).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.model.params.to_flat()), bits(b.model.params.to_flat()));
}

#[test]
fn non_finite_loss_reports_the_step() {
    let ds = gen_blobs(2, 10, 2, 3.0, 0).unwrap();
    let mut model = init_model(2, &[4], 2, 4, HeadMode::Sn, 0).unwrap();
    model.params.f_head.weight[0] = 1e308;
    let cfg = TrainConfig { epochs: 2, batch_size: 5, ..TrainConfig::default() };
    match train(model, &ds, &cfg) {
        Err(syncsel::Error::NonFiniteLoss { step }) => assert_eq!(step, 0),
        other => panic!("{:?}", other.map(|r| r.epochs)),
    }
}
