//! Synthetic datasets, CSV ingestion and stratified splits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

/// Region flag for rows loaded without one.
pub const REGION_UNKNOWN: i32 = -1;
pub const REGION_CLEAN: i32 = 0;
pub const REGION_AMBIGUOUS: i32 = 1;

/// Feature dimension of [`gen_ambiguity`].
pub const AMBIGUITY_DIM: usize = 2;
/// Pairwise center distance of the clean clusters in [`gen_ambiguity`].
pub const AMBIGUITY_SEPARATION: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `n × dim` features.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub regions: Vec<i32>,
    pub num_classes: usize,
    pub dim: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        regions: Vec<i32>,
        num_classes: usize,
        dim: usize,
    ) -> Result<Self> {
        let ds = Dataset { features, labels, regions, num_classes, dim };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(invalid("dataset is empty"));
        }
        if self.dim == 0 || self.features.len() != n * self.dim {
            return Err(Error::DimensionMismatch { expected: n * self.dim, got: self.features.len() });
        }
        if self.regions.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.regions.len() });
        }
        if self.num_classes < 2 {
            return Err(invalid("need at least 2 classes"));
        }
        if let Some(&label) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::LabelOutOfRange { label, classes: self.num_classes });
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.features.chunks_exact(self.dim).collect()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            regions: indices.iter().map(|&i| self.regions[i]).collect(),
            num_classes: self.num_classes,
            dim: self.dim,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Writes `f0,…,f{d−1},label,region` with a header row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        header.push("region".into());
        out.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.regions[i].to_string());
            out.write_record(&rec).map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Cluster centers with pairwise distance `separation` between every pair
/// (`dim ≥ C`, scaled simplex) or between circle neighbours (`dim < C`).
fn centers(classes: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![vec![0.0; dim]; classes];
    if dim >= classes {
        let scale = separation / std::f64::consts::SQRT_2;
        for (c, center) in out.iter_mut().enumerate() {
            center[c] = scale;
        }
    } else if dim >= 2 {
        let angle = std::f64::consts::PI / classes as f64;
        let radius = separation / (2.0 * angle.sin());
        for (c, center) in out.iter_mut().enumerate() {
            let t = 2.0 * angle * c as f64;
            center[0] = radius * t.cos();
            center[1] = radius * t.sin();
        }
    } else if classes == 2 {
        out[0][0] = -separation / 2.0;
        out[1][0] = separation / 2.0;
    } else {
        return Err(invalid(format!("cannot place {classes} centers in {dim} dimension(s)")));
    }
    Ok(out)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `C` unit-variance Gaussian clusters, `per_class` rows each, class-major.
pub fn gen_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(invalid("need classes >= 2, per_class >= 1 and dim >= 1"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(invalid(format!("separation must be finite and >= 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers(classes, dim, separation)?.iter().enumerate() {
        for _ in 0..per_class {
            features.extend(center.iter().map(|m| m + normal(&mut rng)));
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset::new(features, labels, vec![REGION_CLEAN; n], classes, dim)
}

/// Blobs in the plane with a fraction of rows moved into a shared,
/// label-uninformative region.
///
/// Starts from `gen_blobs(C, per_class, 2, 6.0, seed)`. Exactly
/// `round(noise_frac · N)` rows are then replaced by draws from a unit
/// Gaussian at the origin (the centroid of the cluster ring) with uniformly
/// random labels, and flagged with region 1.
pub fn gen_ambiguity(classes: usize, per_class: usize, noise_frac: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=0.5).contains(&noise_frac) {
        return Err(invalid(format!("noise_frac must be in [0, 0.5], got {noise_frac}")));
    }
    let mut ds = gen_blobs(classes, per_class, AMBIGUITY_DIM, AMBIGUITY_SEPARATION, seed)?;
    let n = ds.len();
    let n_amb = (noise_frac * n as f64).round() as usize;
    if n_amb == 0 {
        return Ok(ds);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let picked = rand::seq::index::sample(&mut rng, n, n_amb).into_vec();
    for i in picked {
        for j in 0..AMBIGUITY_DIM {
            ds.features[i * AMBIGUITY_DIM + j] = normal(&mut rng);
        }
        ds.labels[i] = rng.gen_range(0..classes);
        ds.regions[i] = REGION_AMBIGUOUS;
    }
    Ok(ds)
}

/// Reads `f0,…,f{d−1},label[,region]`. The class count is one more than the
/// largest label seen.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_csv(&text, path)
}

fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| err(1, "missing `label` column".into()))?;
    let has_region = match &header[label_col + 1..] {
        [] => false,
        [r] if r == "region" => true,
        _ => return Err(err(1, "expected `label` optionally followed by `region` as last columns".into())),
    };
    for (j, h) in header[..label_col].iter().enumerate() {
        if *h != format!("f{j}") {
            return Err(err(1, format!("expected column `f{j}`, found `{h}`")));
        }
    }
    let dim = label_col;
    if dim == 0 {
        return Err(err(1, "no feature columns".into()));
    }
    let width = header.len();

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut regions = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != width {
            return Err(err(line, format!("expected {width} fields, found {}", rec.len())));
        }
        for (j, field) in rec.iter().take(dim).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| err(line, format!("column f{j}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(line, format!("column f{j}: non-finite value")));
            }
            features.push(v);
        }
        let label = &rec[dim];
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| err(line, format!("label `{label}` is not a non-negative integer")))?,
        );
        regions.push(if has_region {
            let r = &rec[dim + 1];
            r.parse::<i32>()
                .map_err(|_| err(line, format!("region `{r}` is not an integer")))?
        } else {
            REGION_UNKNOWN
        });
    }
    if labels.is_empty() {
        return Err(err(1, "no data rows".into()));
    }
    let num_classes = (labels.iter().copied().max().unwrap() + 1).max(2);
    Dataset::new(features, labels, regions, num_classes, dim)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub cal_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.cal_frac, self.test_frac];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(invalid(format!("split fractions must be in (0, 1), got {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("split fractions must sum to 1, got {fr:?}")));
        }
        Ok(())
    }

    fn fractions(&self) -> [f64; 3] {
        [self.train_frac, self.cal_frac, self.test_frac]
    }
}

/// Largest-remainder apportionment of `n` items by `fractions`.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[s] += 1;
        left -= 1;
    }
    counts
}

/// Stratified, disjoint train/calibration/test split.
///
/// Each class contributes `floor(frac · n_c)` rows to each part; the
/// leftover rows are handed out so that part totals match a largest-remainder
/// apportionment of the whole dataset, at most one extra row per class and
/// part.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let fr = spec.fractions();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if let Some((c, idx)) = by_class.iter().find(|(_, v)| v.len() < 3) {
        return Err(invalid(format!("class {c} has {} rows, fewer than the 3 splits", idx.len())));
    }

    let targets = apportion(ds.len(), &fr);
    let mut per_class: Vec<[usize; 3]> = Vec::new();
    let mut totals = [0usize; 3];
    for idx in by_class.values() {
        let mut counts = [0usize; 3];
        for s in 0..3 {
            counts[s] = (fr[s] * idx.len() as f64).floor() as usize;
            totals[s] += counts[s];
        }
        per_class.push(counts);
    }
    for (counts, idx) in per_class.iter_mut().zip(by_class.values()) {
        let mut left = idx.len() - counts.iter().sum::<usize>();
        let mut used = [false; 3];
        while left > 0 {
            let s = (0..3)
                .filter(|&s| !used[s])
                .max_by(|&a, &b| {
                    let da = targets[a] as i64 - totals[a] as i64;
                    let db = targets[b] as i64 - totals[b] as i64;
                    da.cmp(&db).then(b.cmp(&a))
                })
                .expect("leftover is below the number of parts");
            used[s] = true;
            counts[s] += 1;
            totals[s] += 1;
            left -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (counts, idx) in per_class.iter().zip(by_class.values()) {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let mut start = 0;
        for s in 0..3 {
            parts[s].extend_from_slice(&idx[start..start + counts[s]]);
            start += counts[s];
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((ds.subset(&parts[0]), ds.subset(&parts[1]), ds.subset(&parts[2])))
}

/// Index partition produced by [`split`], for tests and diagnostics.
pub fn split_indices(ds: &Dataset, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    // tag each row with its index in an extra feature column and split that
    let mut tagged = ds.clone();
    tagged.dim = ds.dim + 1;
    tagged.features = Vec::with_capacity(ds.len() * tagged.dim);
    for i in 0..ds.len() {
        tagged.features.extend_from_slice(ds.row(i));
        tagged.features.push(i as f64);
    }
    let (a, b, c) = split(&tagged, spec)?;
    let ids = |d: &Dataset| (0..d.len()).map(|i| d.row(i)[ds.dim] as usize).collect();
    Ok([ids(&a), ids(&b), ids(&c)])
}
