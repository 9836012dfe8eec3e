//! Shared fixtures for the criterion benchmarks under `benches/`.

use syncsel::{collect, gen_ambiguity, init_model, Dataset, EvalRecord, HeadMode, Mechanism, ScoreKind, SelectiveModel};

pub const CLASSES: usize = 4;

/// The default synthetic task: 4 classes, 250 points each, 20% ambiguity.
pub fn dataset(seed: u64) -> Dataset {
    gen_ambiguity(CLASSES, 250, 0.2, seed).expect("fixture dataset")
}

pub fn model(hidden: usize, seed: u64) -> SelectiveModel {
    init_model(2, &[hidden], CLASSES, hidden, HeadMode::Sn, seed).expect("fixture model")
}

/// Evaluation records scored by the untrained model's head.
pub fn records(seed: u64) -> Vec<EvalRecord> {
    collect(&model(32, seed), &dataset(seed), Mechanism::Score(ScoreKind::Sr)).expect("fixture records")
}
