//! Mini-batch SGD with heavy-ball momentum and a cosine learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::losses::{LossSpec, SyncConfig};
use crate::network::{backward_full, Gradients, Params, SelectiveModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub sync: SyncConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 1000,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            sync: SyncConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        self.sync.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub mean_sync_term: f64,
    pub empirical_coverage: f64,
    pub train_accuracy: f64,
    /// Learning rate used by the last step of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: SelectiveModel,
    pub epochs: Vec<EpochRecord>,
    /// Total batch loss at every step.
    pub step_losses: Vec<f64>,
}

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(invalid(format!("step {step} outside [0, {total_steps}]")));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

/// `v ← m·v + (grad + wd·θ)`, then `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut Params,
    grads: &Gradients,
    velocity: &mut Params,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !params.same_shape(&grads.0) || !params.same_shape(velocity) {
        return Err(invalid("parameter, gradient and velocity shapes differ"));
    }
    for ((theta, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.0.tensors())
        .zip(velocity.tensors_mut())
    {
        for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *t);
            *t -= lr * *vi;
        }
    }
    Ok(())
}

fn batch_starts(n: usize, batch_size: usize) -> impl Iterator<Item = usize> {
    (0..n).step_by(batch_size)
}

pub fn train(model: SelectiveModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train_with(model, data, cfg, |_| {})
}

/// [`train`] with a callback after every finished epoch.
pub fn train_with(
    mut model: SelectiveModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    data.validate()?;
    if data.dim != model.arch.input_dim {
        return Err(Error::DimensionMismatch { expected: model.arch.input_dim, got: data.dim });
    }
    if data.num_classes > model.num_classes() {
        return Err(invalid(format!(
            "data has {} classes, model predicts {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    if cfg.sync.mode.head_mode() != model.mode() {
        return Err(invalid(format!(
            "loss mode {} needs a {:?}-mode model",
            cfg.sync.mode.tag(),
            cfg.sync.mode.head_mode()
        )));
    }
    let n = data.len();
    if cfg.batch_size > n {
        return Err(invalid(format!("batch_size {} exceeds dataset size {n}", cfg.batch_size)));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let spec = LossSpec::Config(cfg.sync);
    let rows = data.rows();

    let mut velocity = Params::zeros(&model.arch);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let (mut total, mut sync, mut coverage) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        let mut lr = 0.0;
        for start in batch_starts(n, cfg.batch_size) {
            let idx = &order[start..(start + cfg.batch_size).min(n)];
            let xs: Vec<&[f64]> = idx.iter().map(|&i| rows[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let res = backward_full(&model, &xs, &ys, &spec).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { step },
                other => other,
            })?;
            lr = cosine_lr(step, total_steps, cfg.lr0)?;
            sgd_step(&mut model.params, &res.grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
            if !model.params.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }

            let b = &res.breakdown;
            total += b.total;
            sync += b.sync_term;
            coverage += b.empirical_coverage;
            correct += res.outputs.iter().zip(&ys).filter(|(o, &y)| o.prediction() == y).count();
            step_losses.push(b.total);
            step += 1;
        }
        let k = steps_per_epoch as f64;
        let rec = EpochRecord {
            epoch,
            mean_total_loss: total / k,
            mean_sync_term: sync / k,
            empirical_coverage: (coverage / k).clamp(0.0, 1.0),
            train_accuracy: correct as f64 / n as f64,
            lr,
        };
        on_epoch(&rec);
        epochs.push(rec);
    }
    Ok(TrainRun { model, epochs, step_losses })
}

/// Exponential moving average with span `window` (`α = 2/(window+1)`),
/// seeded with the first value.
pub fn ema(values: &[f64], window: usize) -> Vec<f64> {
    let a = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = match values.first() {
        Some(&v) => v,
        None => return out,
    };
    for &v in values {
        acc = a * v + (1.0 - a) * acc;
        out.push(acc);
    }
    out
}

/// Fraction of steps after the first `warmup_frac` of the run at which the
/// series does not increase.
pub fn non_increasing_fraction(series: &[f64], warmup_frac: f64) -> f64 {
    let start = ((warmup_frac * series.len() as f64).ceil() as usize).max(1);
    if start >= series.len() {
        return 1.0;
    }
    let ok = (start..series.len()).filter(|&i| series[i] <= series[i - 1]).count();
    ok as f64 / (series.len() - start) as f64
}
