//! Strict `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use syncsel::losses::{LossMode, PenaltyMode, SyncConfig};
use syncsel::{Dataset, ScoreKind, SplitSpec, TrainConfig};

use crate::CliError;

/// Every accepted key with its default, in the order written to
/// `config.resolved`. `None` marks keys without a default.
const KEYS: &[(&str, Option<&str>)] = &[
    ("out_dir", None),
    ("seed", Some("0")),
    ("dataset", Some("ambiguity")),
    ("data_path", Some("")),
    ("classes", Some("4")),
    ("per_class", Some("250")),
    ("noise", Some("0.2")),
    ("dim", Some("2")),
    ("separation", Some("6")),
    ("train_frac", Some("0.8")),
    ("cal_frac", Some("0.1")),
    ("test_frac", Some("0.1")),
    ("hidden", Some("32,32")),
    ("g_hidden", Some("32")),
    ("epochs", Some("500")),
    ("batch_size", Some("full")),
    ("lr", Some("0.1")),
    ("momentum", Some("0.9")),
    ("weight_decay", Some("0")),
    ("loss", Some("sync")),
    ("coverage", Some("0.7")),
    ("lambda", Some("6")),
    ("alpha", Some("0.5")),
    ("mu", Some("1")),
    ("score", Some("smp")),
    ("gamma", Some("0.5")),
    ("penalty", Some("hinge")),
    ("odds", Some("2")),
    ("trace", Some("false")),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Ambiguity { classes: usize, per_class: usize, noise: f64 },
    Blobs { classes: usize, per_class: usize, dim: usize, separation: f64 },
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchSize {
    Full,
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub data: DataSource,
    pub split: SplitSpec,
    pub hidden: Vec<usize>,
    pub g_hidden: usize,
    pub epochs: usize,
    pub batch_size: BatchSize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sync: SyncConfig,
    pub trace: bool,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

/// Raw key/value pairs; rejects unknown and duplicate keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let key = k.trim();
        if !KEYS.iter().any(|(name, _)| *name == key) {
            return Err(bad(format!("line {}: unknown key `{key}`", i + 1)));
        }
        if out.insert(key.to_string(), unquote(v.trim()).to_string()).is_some() {
            return Err(bad(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(values: &BTreeMap<String, String>, key: &str) -> Result<T, CliError> {
    let v = &values[key];
    v.parse()
        .map_err(|_| bad(format!("key `{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = parse_pairs(text)?;
        for (key, default) in KEYS {
            if let Some(d) = default {
                values.entry(key.to_string()).or_insert_with(|| d.to_string());
            }
        }
        Self::from_values(values)
    }

    fn from_values(values: BTreeMap<String, String>) -> Result<Self, CliError> {
        let v = &values;
        let classes = parse(v, "classes")?;
        let per_class = parse(v, "per_class")?;
        let data = match v["dataset"].as_str() {
            "ambiguity" => DataSource::Ambiguity { classes, per_class, noise: parse(v, "noise")? },
            "blobs" => DataSource::Blobs { classes, per_class, dim: parse(v, "dim")?, separation: parse(v, "separation")? },
            "csv" => {
                if v["data_path"].is_empty() {
                    return Err(bad("dataset = csv needs `data_path`"));
                }
                DataSource::Csv(PathBuf::from(&v["data_path"]))
            }
            other => return Err(bad(format!("key `dataset`: expected ambiguity, blobs or csv, got `{other}`"))),
        };
        let hidden = if v["hidden"].trim().is_empty() {
            Vec::new()
        } else {
            v["hidden"]
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(format!("key `hidden`: expected comma-separated widths, got `{}`", v["hidden"])))?
        };
        let batch_size = match v["batch_size"].as_str() {
            "full" => BatchSize::Full,
            _ => BatchSize::Fixed(parse(v, "batch_size")?),
        };
        let mode = match v["loss"].as_str() {
            "sn" => LossMode::Sn,
            "dg" => LossMode::Dg,
            "sync" => LossMode::Sync,
            other => return Err(bad(format!("key `loss`: expected sn, dg or sync, got `{other}`"))),
        };
        let penalty = match v["penalty"].as_str() {
            "hinge" => PenaltyMode::Hinge,
            "symmetric" => PenaltyMode::Symmetric,
            other => return Err(bad(format!("key `penalty`: expected hinge or symmetric, got `{other}`"))),
        };
        let gamma: f64 = parse(v, "gamma")?;
        let score = match v["score"].as_str() {
            "smp" => ScoreKind::Smp(gamma),
            "sr" => ScoreKind::Sr,
            "negent" => ScoreKind::NegEntropy,
            other => return Err(bad(format!("key `score`: expected smp, sr or negent, got `{other}`"))),
        };
        let trace = match v["trace"].as_str() {
            "true" => true,
            "false" => false,
            other => return Err(bad(format!("key `trace`: expected true or false, got `{other}`"))),
        };
        let sync = SyncConfig {
            target_coverage: parse(v, "coverage")?,
            lambda: parse(v, "lambda")?,
            alpha: parse(v, "alpha")?,
            mu: parse(v, "mu")?,
            score,
            penalty,
            odds: parse(v, "odds")?,
            mode,
        };
        sync.validate().map_err(|e| bad(e.to_string()))?;
        let seed = parse(v, "seed")?;
        let split = SplitSpec {
            train_frac: parse(v, "train_frac")?,
            cal_frac: parse(v, "cal_frac")?,
            test_frac: parse(v, "test_frac")?,
            seed,
        };
        split.validate().map_err(|e| bad(e.to_string()))?;
        let cfg = RunConfig {
            out_dir: v.get("out_dir").map(PathBuf::from),
            seed,
            data,
            split,
            hidden,
            g_hidden: parse(v, "g_hidden")?,
            epochs: parse(v, "epochs")?,
            batch_size,
            lr: parse(v, "lr")?,
            momentum: parse(v, "momentum")?,
            weight_decay: parse(v, "weight_decay")?,
            sync,
            trace,
            values,
        };
        cfg.train_config(1).validate().map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }

    /// Replaces one key, re-validating the whole configuration.
    pub fn with(&self, key: &str, value: impl Into<String>) -> Result<Self, CliError> {
        let mut values = self.values.clone();
        values.insert(key.to_string(), value.into());
        Self::from_values(values)
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| bad("missing required key `out_dir` (or pass --out)"))
    }

    pub fn train_config(&self, n_train: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: match self.batch_size {
                BatchSize::Full => n_train,
                BatchSize::Fixed(b) => b,
            },
            lr0: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            sync: self.sync,
        }
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let ds = match &self.data {
            DataSource::Ambiguity { classes, per_class, noise } => {
                syncsel::gen_ambiguity(*classes, *per_class, *noise, self.seed)
            }
            DataSource::Blobs { classes, per_class, dim, separation } => {
                syncsel::gen_blobs(*classes, *per_class, *dim, *separation, self.seed)
            }
            DataSource::Csv(path) => syncsel::load_csv(path),
        };
        ds.map_err(CliError::Data)
    }

    pub fn splits(&self) -> Result<(Dataset, Dataset, Dataset), CliError> {
        syncsel::split(&self.dataset()?, &self.split).map_err(CliError::Data)
    }

    /// Every key with its effective value, one per line in a fixed order.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            if let Some(v) = self.values.get(*key) {
                let needs_quotes = v.is_empty() || v.contains('#') || v.contains(char::is_whitespace);
                if needs_quotes {
                    writeln!(out, "{key} = \"{v}\"").unwrap();
                } else {
                    writeln!(out, "{key} = {v}").unwrap();
                }
            }
        }
        out
    }
}
