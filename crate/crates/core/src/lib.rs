//! Selective classification with a selection head synchronized to
//! softmax-derived confidence.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod network;
pub mod scores;
pub mod theory;
pub mod train;

pub use data::{gen_ambiguity, gen_blobs, load_csv, split, Dataset, SplitSpec};
pub use error::{Error, Result};
pub use eval::{
    calibrate_threshold, collect, confusion_table, rc_curve, region_rejection, selective_metrics,
    Confusion, EvalRecord, Mechanism, RcPoint, RiskCoverageCurve, SelectiveMetrics,
};
pub use losses::{BatchLossBreakdown, LossMode, LossSpec, PenaltyMode, SyncConfig};
pub use network::{load_checkpoint, save_checkpoint};
pub use network::{backward, init_model, Architecture, Gradients, HeadMode, HeadOutputs, Params, SelectiveModel};
pub use scores::{neg_entropy_score, score, smp_score, sr_score, ProbVector, ScoreKind};
pub use theory::{check_gamma_admissible, lipschitz_modulus, TheoryReport};
pub use train::{cosine_lr, sgd_step, train, EpochRecord, TrainConfig, TrainRun};
