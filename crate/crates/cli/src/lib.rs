//! Subcommands of the `syncsel` binary.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use syncsel::eval::{default_grid, plain_accuracy};
use syncsel::network::HeadMode;
use syncsel::theory::verify_suite;
use syncsel::train::train_with;
use syncsel::{
    calibrate_threshold, collect, confusion_table, init_model, load_checkpoint, load_csv, rc_curve, region_rejection,
    save_checkpoint, Dataset, EpochRecord, Mechanism, SelectiveModel, TrainRun,
};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(syncsel::Error),
    #[error("training diverged: {0}")]
    NonFinite(syncsel::Error),
    #[error("{0}")]
    Core(syncsel::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NonFinite(_) => 2,
            CliError::Verify(_) => 3,
            _ => 1,
        }
    }
}

impl From<syncsel::Error> for CliError {
    fn from(e: syncsel::Error) -> Self {
        match e {
            syncsel::Error::NonFiniteLoss { .. } | syncsel::Error::NonFinite(_) => CliError::NonFinite(e),
            other => CliError::Core(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Parser)]
#[command(name = "syncsel", version, about = "Selective classification with a synchronized selection head")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a CSV dataset.
    Eval(EvalArgs),
    /// Run the sampled checks of the theoretical bounds.
    Verify(VerifyArgs),
    /// Train and evaluate once per SMP exponent.
    Sweep(SweepArgs),
    /// Write the configured dataset and its splits as CSV.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the dataset splits as CSV.
    #[arg(long)]
    pub dump: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// head, sr, smp:<gamma> or negent.
    #[arg(long, default_value = "head")]
    pub mechanism: String,
    /// Comma-separated coverages; defaults to 0.1,0.2,…,1.0.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out data for calibrating the confusion/region threshold.
    /// Without it the threshold is calibrated on `--data`.
    #[arg(long)]
    pub cal: Option<PathBuf>,
    /// Target coverage of the confusion/region threshold.
    #[arg(long, default_value_t = 0.7)]
    pub coverage: f64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub halve_modulus: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated SMP exponents.
    #[arg(long)]
    pub gamma: String,
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Verify(a) => cmd_verify(&a, &mut std::io::stdout().lock()),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Gen(a) => cmd_gen(&a),
    }
}

fn load_config(path: &Path, out: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = out {
        cfg = cfg.with("out_dir", out.to_string_lossy())?;
    }
    if let Some(seed) = seed {
        cfg = cfg.with("seed", seed.to_string())?;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Config(format!("{what}: expected comma-separated numbers, got `{s}`")))
}

fn parse_grid(s: &Option<String>) -> Result<Vec<f64>, CliError> {
    match s {
        None => Ok(default_grid()),
        Some(s) => parse_list(s, "--grid"),
    }
}

fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,total,sync,coverage,acc,lr\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.mean_total_loss, r.mean_sync_term, r.empirical_coverage, r.train_accuracy, r.lr
        ));
    }
    out
}

fn trace_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,total\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l:.6}\n"));
    }
    out
}

fn dump_splits(dir: &Path, parts: &(Dataset, Dataset, Dataset)) -> Result<(), CliError> {
    for (name, ds) in [("train.csv", &parts.0), ("cal.csv", &parts.1), ("test.csv", &parts.2)] {
        let path = dir.join(name);
        ds.save_csv(&path).map_err(CliError::Data)?;
    }
    Ok(())
}

/// Trains per `cfg` and writes checkpoint, metrics and resolved config.
fn train_into(cfg: &RunConfig, dir: &Path, parts: &(Dataset, Dataset, Dataset)) -> Result<TrainRun, CliError> {
    let train_set = &parts.0;
    let model = init_model(
        train_set.dim,
        &cfg.hidden,
        train_set.num_classes,
        cfg.g_hidden,
        cfg.sync.mode.head_mode(),
        cfg.seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let tc = cfg.train_config(train_set.len());
    tc.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let run = train_with(model, train_set, &tc, |r| {
        if r.epoch % 50 == 0 {
            eprintln!("epoch {:>4} loss {:.5} coverage {:.3} acc {:.3}", r.epoch, r.mean_total_loss, r.empirical_coverage, r.train_accuracy);
        }
    })?;
    create_dir(dir)?;
    let ckpt = dir.join("checkpoint");
    save_checkpoint(&run.model, &ckpt)?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(&run.epochs))?;
    write_file(&dir.join("config.resolved"), &cfg.resolved())?;
    if cfg.trace {
        write_file(&dir.join("trace.csv"), &trace_csv(&run.step_losses))?;
    }
    Ok(run)
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config, &a.out, a.seed)?;
    let dir = cfg.out_dir()?.to_path_buf();
    let parts = cfg.splits()?;
    train_into(&cfg, &dir, &parts)?;
    if a.dump {
        dump_splits(&dir, &parts)?;
    }
    Ok(())
}

fn fmt6(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// Writes `rc_curve.csv`, `confusion.csv` and `regions.csv` into `dir`.
///
/// Returns the curve for callers that aggregate results.
fn evaluate_into(
    model: &SelectiveModel,
    data: &Dataset,
    cal: Option<&Dataset>,
    mechanism: Mechanism,
    grid: &[f64],
    coverage: f64,
    dir: &Path,
) -> Result<syncsel::RiskCoverageCurve, CliError> {
    let records = collect(model, data, mechanism)?;
    let curve = rc_curve(&records, grid).map_err(|e| CliError::Config(e.to_string()))?;
    let tau = match cal {
        Some(c) => calibrate_threshold(&collect(model, c, mechanism)?, coverage),
        None => calibrate_threshold(&records, coverage),
    }
    .map_err(|e| CliError::Config(e.to_string()))?;

    create_dir(dir)?;
    let mut rc = String::from("coverage,threshold,risk,accuracy\n");
    for p in &curve.points {
        rc.push_str(&format!("{},{},{},{}\n", fmt6(p.coverage), fmt6(p.threshold), fmt6(p.risk), fmt6(p.accuracy)));
    }
    write_file(&dir.join("rc_curve.csv"), &rc)?;

    let c = confusion_table(&records, tau)?;
    let conf = format!(
        "accept_correct,accept_incorrect,reject_correct,reject_incorrect,coverage\n{},{},{},{},{}\n",
        fmt6(c.accept_correct),
        fmt6(c.accept_incorrect),
        fmt6(c.reject_correct),
        fmt6(c.reject_incorrect),
        fmt6(c.coverage())
    );
    write_file(&dir.join("confusion.csv"), &conf)?;

    let mut regions = String::from("region,count,rejected,rejection_rate\n");
    for r in region_rejection(&records, tau) {
        regions.push_str(&format!("{},{},{},{}\n", r.region, r.count, r.rejected, fmt6(r.rejection_rate)));
    }
    write_file(&dir.join("regions.csv"), &regions)?;
    eprintln!(
        "{mechanism}: accuracy {:.4}, threshold {} at coverage {coverage}",
        plain_accuracy(&records),
        fmt6(tau)
    );
    Ok(curve)
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    load_csv(path).map_err(CliError::Data)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let mechanism: Mechanism = a.mechanism.parse().map_err(|e| CliError::Config(format!("--mechanism: {e}")))?;
    let grid = parse_grid(&a.grid)?;
    let model = load_checkpoint(&a.checkpoint)
        .map_err(|e| CliError::Config(format!("cannot load checkpoint {}: {e}", a.checkpoint.display())))?;
    if mechanism == Mechanism::Head && model.mode() == HeadMode::Dg {
        eprintln!("note: DG checkpoint, head mechanism scores samples by the negated abstain probability");
    }
    let data = load_data(&a.data)?;
    let cal = a.cal.as_deref().map(load_data).transpose()?;
    evaluate_into(&model, &data, cal.as_ref(), mechanism, &grid, a.coverage, &a.out)?;
    Ok(())
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut impl Write) -> Result<(), CliError> {
    let reports = verify_suite(a.seed, a.halve_modulus)?;
    let mut failed = Vec::new();
    for r in &reports {
        let line = serde_json::to_string(r).expect("reports serialize");
        writeln!(out, "{line}").map_err(io_err(Path::new("<stdout>")))?;
        if !r.passed {
            failed.push(r.check_name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}

/// Unique values in first-seen order.
fn dedup_gammas(gammas: Vec<f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for g in gammas {
        if out.contains(&g) {
            eprintln!("warning: duplicate gamma {g} ignored");
        } else {
            out.push(g);
        }
    }
    out
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config, &a.out, a.seed)?;
    let root = cfg.out_dir()?.to_path_buf();
    let grid = parse_grid(&a.grid)?;
    let gammas = dedup_gammas(parse_list(&a.gamma, "--gamma")?);
    if gammas.is_empty() {
        return Err(CliError::Config("--gamma needs at least one value".into()));
    }
    let parts = cfg.splits()?;
    create_dir(&root)?;

    let mut table = String::from("gamma,mechanism,coverage,accuracy\n");
    let mut first_error: Option<CliError> = None;
    for gamma in gammas {
        let cell = |gamma: f64| -> Result<String, CliError> {
            let cell_cfg = cfg.with("score", "smp")?.with("gamma", gamma.to_string())?;
            let dir = root.join(format!("gamma_{gamma}"));
            let run = train_into(&cell_cfg, &dir, &parts)?;
            let mut rows = String::new();
            for (name, mechanism) in [("head", Mechanism::Head), ("sr", Mechanism::Score(syncsel::ScoreKind::Sr))] {
                let curve = evaluate_into(
                    &run.model,
                    &parts.2,
                    Some(&parts.1),
                    mechanism,
                    &grid,
                    cfg.sync.target_coverage,
                    &dir.join(format!("eval_{name}")),
                )?;
                for p in &curve.points {
                    rows.push_str(&format!("{gamma},{name},{},{}\n", fmt6(p.coverage), fmt6(p.accuracy)));
                }
            }
            Ok(rows)
        };
        match cell(gamma) {
            Ok(rows) => table.push_str(&rows),
            Err(e) => {
                eprintln!("gamma {gamma}: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    write_file(&root.join("sweep.csv"), &table)?;
    first_error.map_or(Ok(()), Err)
}

pub fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config, &a.out, a.seed)?;
    let dir = cfg.out_dir()?.to_path_buf();
    create_dir(&dir)?;
    let full = cfg.dataset()?;
    full.save_csv(dir.join("data.csv")).map_err(CliError::Data)?;
    dump_splits(&dir, &cfg.splits()?)
}
