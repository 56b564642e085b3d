//! Synthetic datasets, distribution shift, seeded splits and CSV I/O.

use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PredictionSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        let (n, d) = features.dims2()?;
        if n == 0 {
            return Err(Error::config("a dataset needs at least one sample"));
        }
        if labels.len() != n {
            return Err(Error::shape(format!("{n} feature rows but {} labels", labels.len())));
        }
        if d != meta.dim {
            return Err(Error::shape(format!("{d} feature columns, metadata says {}", meta.dim)));
        }
        if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= meta.classes) {
            return Err(Error::config(format!(
                "label {y} at row {i} outside [0, {})",
                meta.classes
            )));
        }
        if !features.all_finite() {
            return Err(Error::non_finite("dataset features"));
        }
        Ok(Dataset {
            features,
            labels,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn classes(&self) -> usize {
        self.meta.classes
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.meta.clone(),
        )
    }

    /// Widens the class count, e.g. when a split read from CSV lacks the top class.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if classes < self.meta.classes {
            return Err(Error::config(format!(
                "cannot shrink class count from {} to {classes}",
                self.meta.classes
            )));
        }
        self.meta.classes = classes;
        Ok(self)
    }
}

/// `K` Gaussian clusters whose means lie on the unit sphere in `d` dimensions.
///
/// `class_overlap` is the per-coordinate standard deviation of each cluster.
/// With probability `label_noise` a label is replaced by a different class
/// drawn uniformly.
pub fn gen_blobs(
    classes: usize,
    dim: usize,
    n: usize,
    class_overlap: f64,
    label_noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim == 0 || n == 0 {
        return Err(Error::config(format!(
            "blobs need K >= 2, d >= 1, n >= 1 (got K={classes}, d={dim}, n={n})"
        )));
    }
    if !(class_overlap >= 0.0 && class_overlap.is_finite()) {
        return Err(Error::config(format!("class_overlap must be >= 0, got {class_overlap}")));
    }
    if !(0.0..0.5).contains(&label_noise) {
        return Err(Error::config(format!("label_noise must be in [0, 0.5), got {label_noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        means.push(v);
    }

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        let x: Vec<f64> = means[y]
            .iter()
            .map(|&m| m + class_overlap * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let noisy = if label_noise > 0.0 && rng.random::<f64>() < label_noise {
            let shift = rng.random_range(1..classes);
            (y + shift) % classes
        } else {
            y
        };
        rows.push((x, noisy));
    }
    rows.shuffle(&mut rng);

    let (features, labels): (Vec<Vec<f64>>, Vec<usize>) = rows.into_iter().unzip();
    Dataset::new(
        Tensor::from_rows(&features)?,
        labels,
        DatasetMeta {
            name: "blobs".into(),
            dim,
            classes,
            seed,
        },
    )
}

/// Two interleaved half circles, `ceil(n/2)` on the outer arc (class 0).
pub fn gen_two_moons(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::config("two moons needs n >= 2"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::config(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let n_outer = n.div_ceil(2);
    let n_inner = n - n_outer;
    let arc = |count: usize, i: usize| {
        if count > 1 {
            PI * i as f64 / (count - 1) as f64
        } else {
            0.0
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = arc(n_outer, i);
        rows.push((vec![t.cos(), t.sin()], 0));
    }
    for i in 0..n_inner {
        let t = arc(n_inner, i);
        rows.push((vec![1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    for (x, _) in rows.iter_mut() {
        for v in x.iter_mut() {
            *v += noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    rows.shuffle(&mut rng);
    let (features, labels): (Vec<Vec<f64>>, Vec<usize>) = rows.into_iter().unzip();
    Dataset::new(
        Tensor::from_rows(&features)?,
        labels,
        DatasetMeta {
            name: "two_moons".into(),
            dim: 2,
            classes: 2,
            seed,
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    GaussianNoise,
    FeatureScale,
    FeatureRotate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: u32,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, severity: u32) -> Result<Self> {
        let spec = ShiftSpec { kind, severity };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::config(format!(
                "shift severity must be in 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }

    /// Noise std, scale factor or rotation angle (radians) for this severity.
    pub fn magnitude(&self) -> f64 {
        let s = self.severity as f64;
        match self.kind {
            ShiftKind::GaussianNoise => 0.1 * s,
            ShiftKind::FeatureScale => 1.0 + 0.15 * s,
            ShiftKind::FeatureRotate => (9.0 * s).to_radians(),
        }
    }

    pub fn label(&self) -> String {
        let kind = match self.kind {
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::FeatureScale => "feature_scale",
            ShiftKind::FeatureRotate => "feature_rotate",
        };
        format!("{kind}_s{}", self.severity)
    }
}

/// Corrupts features; labels and sample order are untouched.
///
/// Gaussian noise draws its standard-normal directions from `seed` alone, so
/// the same seed at higher severity scales the same perturbation.
pub fn apply_shift(ds: &Dataset, spec: ShiftSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut features = ds.features.clone();
    let d = ds.dim();
    match spec.kind {
        ShiftKind::GaussianNoise => {
            let sigma = spec.magnitude();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in features.data_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        ShiftKind::FeatureScale => {
            let factor = spec.magnitude();
            features.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        ShiftKind::FeatureRotate => {
            if d < 2 {
                return Err(Error::config("feature_rotate needs at least 2 features"));
            }
            let (s, c) = spec.magnitude().sin_cos();
            for row in features.data_mut().chunks_mut(d) {
                let (x, y) = (row[0], row[1]);
                row[0] = c * x - s * y;
                row[1] = s * x + c * y;
            }
        }
    }
    let mut meta = ds.meta.clone();
    meta.name = format!("{}+{}", meta.name, spec.label());
    Dataset::new(features, ds.labels.clone(), meta)
}

/// Seeded permutation, then contiguous train / val / test slices.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let n = ds.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::config(format!(
            "fractions {fractions:?} leave an empty split for n = {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((ds.subset(train)?, ds.subset(val)?, ds.subset(test)?))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), format!("{other:?}")),
    }
}

/// Validates a `{prefix}0,…,{prefix}{n-1},label` header and returns `n`.
fn check_header(path: &Path, headers: &csv::StringRecord, prefix: &str) -> Result<usize> {
    let cols: Vec<&str> = headers.iter().collect();
    let ctx = || path.display().to_string();
    match cols.last() {
        Some(&"label") => {}
        Some(other) => {
            return Err(Error::parse(ctx(), format!("last column must be `label`, found `{other}`")))
        }
        None => return Err(Error::parse(ctx(), "missing header row")),
    }
    let width = cols.len() - 1;
    for (i, name) in cols[..width].iter().enumerate() {
        let expected = format!("{prefix}{i}");
        if *name != expected {
            return Err(Error::parse(
                ctx(),
                format!("column {i} is `{name}`, expected `{expected}`"),
            ));
        }
    }
    Ok(width)
}

fn read_rows(path: &Path, prefix: &str) -> Result<(usize, Vec<f64>, Vec<usize>)> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let width = check_header(path, &headers, prefix)?;
    if width == 0 {
        return Err(Error::parse(path.display().to_string(), "no value columns"));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| {
            Error::parse(format!("{} row {row}", path.display()), e)
        })?;
        if rec.len() != width + 1 {
            return Err(Error::parse(
                format!("{} row {row}", path.display()),
                format!("expected {} fields, found {}", width + 1, rec.len()),
            ));
        }
        for (j, field) in rec.iter().take(width).enumerate() {
            let v: f64 = field.trim().parse().map_err(|e| {
                Error::parse(format!("{} row {row} column {prefix}{j}", path.display()), e)
            })?;
            values.push(v);
        }
        let label: usize = rec[width].trim().parse().map_err(|e| {
            Error::parse(format!("{} row {row} column label", path.display()), e)
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::parse(path.display().to_string(), "no data rows"));
    }
    Ok((width, values, labels))
}

pub fn read_csv_dataset(path: &Path) -> Result<Dataset> {
    let (d, values, labels) = read_rows(path, "f")?;
    let n = labels.len();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let name = path
        .file_stem()
        .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        Tensor::new(vec![n, d], values)?,
        labels,
        DatasetMeta {
            name,
            dim: d,
            classes,
            seed: 0,
        },
    )
}

fn write_rows(path: &Path, prefix: &str, values: &Tensor, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let width = values.cols();
    let mut header: Vec<String> = (0..width).map(|j| format!("{prefix}{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (row, y) in values.row_iter().zip(labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_rows(path, "f", &ds.features, &ds.labels)
}

/// Externally produced logits with header `l0,…,l{K-1},label`.
pub fn read_logits_csv(path: &Path) -> Result<PredictionSet> {
    let (k, values, labels) = read_rows(path, "l")?;
    let n = labels.len();
    PredictionSet::from_logits(Tensor::new(vec![n, k], values)?, labels)
}

pub fn write_logits_csv(preds: &PredictionSet, path: &Path) -> Result<()> {
    let logits = preds
        .logits
        .as_ref()
        .ok_or_else(|| Error::config("prediction set has no logits to write"))?;
    write_rows(path, "l", logits, &preds.labels)
}
