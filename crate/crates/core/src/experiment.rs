//! Experiment configuration and the commands behind the `samcal` binary.
//!
//! Every command validates the whole configuration before touching the
//! output directory, and writes its numbers with a fixed field order so that
//! identical inputs give byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, apply_shift, gen_blobs, gen_two_moons, split, Dataset, ShiftSpec};
use crate::error::{Error, Result};
use crate::losses::predictive_entropy;
use crate::metrics::{ensemble_predict, reliability_data, MetricsReport, PredictionSet, DEFAULT_BINS};
use crate::mlp::{MlpSpec, ModelParams};
use crate::optim::{train, train_ensemble, OptimizerKind, TrainConfig, TrainOutcome, TrainStatus};
use crate::posthoc::{fit_isotonic, fit_temperature, Calibrator};
use crate::theory::{
    default_lambda_grid, lambda_csv, lambda_landscape, landscape_is_monotone, lemma1_monitor_tail,
    theorem1_suite, theorem2_suite, theorem3_suite, BatchSuiteSummary, Lemma1Report, SuiteSummary,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    #[default]
    Blobs,
    TwoMoons,
    /// Read `train.csv`, `val.csv` and `test.csv` from `dir`.
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub generator: Generator,
    pub classes: usize,
    pub dim: usize,
    pub n: usize,
    pub overlap: f64,
    pub label_noise: f64,
    /// Noise of the two-moons generator.
    pub noise_sd: f64,
    pub seed: u64,
    pub fractions: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            generator: Generator::Blobs,
            classes: 4,
            dim: 8,
            n: 4000,
            overlap: 0.45,
            label_noise: 0.0,
            noise_sd: 0.1,
            seed: 1,
            fractions: [0.6, 0.2, 0.2],
            dir: None,
        }
    }
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        let f = self.fractions;
        if f.iter().any(|&x| !(x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "data.fractions must be positive and sum to 1, got {f:?}"
            )));
        }
        match self.generator {
            Generator::Blobs => {
                if self.classes < 2 || self.dim == 0 {
                    return Err(Error::config("data: blobs need classes >= 2 and dim >= 1"));
                }
                if !(self.overlap > 0.0 && self.overlap.is_finite()) {
                    return Err(Error::config(format!("data.overlap must be > 0, got {}", self.overlap)));
                }
                if !(0.0..=1.0).contains(&self.label_noise) {
                    return Err(Error::config(format!(
                        "data.label_noise must be in [0, 1], got {}",
                        self.label_noise
                    )));
                }
            }
            Generator::TwoMoons => {
                if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
                    return Err(Error::config(format!("data.noise_sd must be >= 0, got {}", self.noise_sd)));
                }
            }
            Generator::Csv => {
                if self.dir.is_none() {
                    return Err(Error::config("data.dir is required when generator = \"csv\""));
                }
                return Ok(());
            }
        }
        let smallest = f.iter().cloned().fold(f64::INFINITY, f64::min);
        if (self.n as f64 * smallest).round() < 1.0 {
            return Err(Error::config(format!(
                "data.n = {} leaves an empty split for fractions {f:?}",
                self.n
            )));
        }
        Ok(())
    }

    /// Feature width and class count implied by the generator, if known.
    fn shape(&self) -> Option<(usize, usize)> {
        match self.generator {
            Generator::Blobs => Some((self.dim, self.classes)),
            Generator::TwoMoons => Some((2, 2)),
            Generator::Csv => None,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        match self.generator {
            Generator::Blobs => gen_blobs(self.classes, self.dim, self.n, self.overlap, self.label_noise, self.seed),
            Generator::TwoMoons => gen_two_moons(self.n, self.noise_sd, self.seed),
            Generator::Csv => Err(Error::config("csv data is read, not generated")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSection {
    pub fn spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(self.layer_sizes.clone(), self.seed)
    }
}

pub const METRIC_NAMES: [&str; 6] = ["acc", "ece", "ada_ece", "classwise_ece", "nll", "auroc_misclass"];

fn all_metrics() -> Vec<String> {
    METRIC_NAMES.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    #[serde(rename = "M")]
    pub bins: usize,
    pub metrics: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            bins: DEFAULT_BINS,
            metrics: all_metrics(),
        }
    }
}

impl EvalSection {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::config("eval.M must be >= 1"));
        }
        if let Some(m) = self.metrics.iter().find(|m| !METRIC_NAMES.contains(&m.as_str())) {
            return Err(Error::config(format!(
                "eval.metrics: unknown metric {m:?}, expected one of {METRIC_NAMES:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosthocMethod {
    #[default]
    None,
    Temperature,
    Isotonic,
}

impl std::str::FromStr for PosthocMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PosthocMethod::None),
            "temperature" => Ok(PosthocMethod::Temperature),
            "isotonic" => Ok(PosthocMethod::Isotonic),
            other => Err(Error::config(format!(
                "unknown calibration method {other:?}, expected temperature or isotonic"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosthocSection {
    pub method: PosthocMethod,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Rho,
    Gamma,
    SwitchEpoch,
}

fn default_seeds() -> u32 {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub param: SweepParam,
    pub values: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: u32,
}

impl SweepSection {
    /// `base` with the swept parameter set to `value`.
    pub fn apply(&self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self.param {
            SweepParam::Rho => cfg.rho = value,
            SweepParam::Gamma => cfg.gamma = value,
            SweepParam::SwitchEpoch => {
                if !(value >= 0.0 && value.fract() == 0.0) {
                    return Err(Error::config(format!(
                        "sweep: switch_epoch values must be non-negative integers, got {value}"
                    )));
                }
                cfg.switch_epoch = Some(value as u32);
            }
        }
        cfg.validate()
            .map_err(|e| Error::config(format!("sweep value {value}: {e}")))?;
        Ok(cfg)
    }

    fn name(&self) -> &'static str {
        match self.param {
            SweepParam::Rho => "rho",
            SweepParam::Gamma => "gamma",
            SweepParam::SwitchEpoch => "switch_epoch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub n: u32,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { n: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSection {
    pub specs: Vec<ShiftSpec>,
    /// Seed of the gaussian-noise corruption.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub samples: usize,
    pub batches: usize,
    pub max_batch: usize,
    pub seed: u64,
    /// Radius of the batch-size-1 probe run.
    pub probe_rho: f64,
    pub probe_epochs: u32,
    /// Share of the last probe steps fed to the monitor.
    pub probe_tail: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            samples: 100_000,
            batches: 10_000,
            max_batch: 16,
            seed: 0,
            probe_rho: 0.05,
            probe_epochs: 10,
            probe_tail: 0.25,
        }
    }
}

impl TheorySection {
    pub fn validate(&self) -> Result<()> {
        if self.max_batch == 0 {
            return Err(Error::config("theory.max_batch must be >= 1"));
        }
        if !(self.probe_rho >= 0.0 && self.probe_rho.is_finite()) {
            return Err(Error::config(format!("theory.probe_rho must be >= 0, got {}", self.probe_rho)));
        }
        if !(self.probe_tail > 0.0 && self.probe_tail <= 1.0) {
            return Err(Error::config(format!(
                "theory.probe_tail must be in (0, 1], got {}",
                self.probe_tail
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub posthoc: PosthocSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub shift: ShiftSection,
    #[serde(default)]
    pub theory: TheorySection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::parse("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let spec = self.model.spec()?;
        if let Some((dim, classes)) = self.data.shape() {
            if spec.input_dim() != dim {
                return Err(Error::config(format!(
                    "model.layer_sizes starts with {} but the data has {dim} features",
                    spec.input_dim()
                )));
            }
            if spec.num_classes() < classes {
                return Err(Error::config(format!(
                    "model outputs {} classes but the data has {classes}",
                    spec.num_classes()
                )));
            }
        }
        self.train.validate()?;
        self.eval.validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() || sweep.seeds == 0 {
                return Err(Error::config("sweep needs at least one value and one seed"));
            }
            for &v in &sweep.values {
                sweep.apply(&self.train, v)?;
            }
        }
        if self.ensemble.n == 0 {
            return Err(Error::config("ensemble.n must be >= 1"));
        }
        for s in &self.shift.specs {
            s.validate()?;
        }
        self.theory.validate()
    }

    /// `--seed` override: reseeds both the initialization and the batch order.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// Process-level result of a command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Diverged,
    TheoryViolation,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Completed => 0,
            RunStatus::Diverged => 3,
            RunStatus::TheoryViolation => 4,
        }
    }
}

/// Exit code for a command error.
pub fn error_exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommandOutcome {
    pub status: RunStatus,
    /// Human-readable summary, one line per item.
    pub summary: Vec<String>,
    pub files: Vec<PathBuf>,
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)
            .map_err(|e| Error::config(format!("cannot serialize {name}: {e}")))?;
        s.push('\n');
        self.text(name, &s)
    }
}

/// Metrics JSON restricted to the configured metric names (plus `n`, `M`).
pub fn metrics_value(report: &MetricsReport, metrics: &[String]) -> serde_json::Value {
    let mut v = serde_json::to_value(report).expect("metrics serialize");
    if let Some(map) = v.as_object_mut() {
        map.retain(|k, _| k == "n" || k == "M" || metrics.iter().any(|m| m == k));
    }
    v
}

pub fn predict(models: &[ModelParams], ds: &Dataset) -> Result<PredictionSet> {
    match models {
        [single] => PredictionSet::from_logits(single.forward(&ds.features)?, ds.labels.clone()),
        _ => ensemble_predict(models, &ds.features, &ds.labels),
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn read_split_dir(dir: &Path) -> Result<Splits> {
    Ok(Splits {
        train: data::read_csv_dataset(&dir.join("train.csv"))?,
        val: data::read_csv_dataset(&dir.join("val.csv"))?,
        test: data::read_csv_dataset(&dir.join("test.csv"))?,
    })
}

/// Splits from `data_dir`, the configured CSV directory, or the generator.
pub fn load_splits(cfg: &DataSection, data_dir: Option<&Path>) -> Result<Splits> {
    if let Some(dir) = data_dir {
        return read_split_dir(dir);
    }
    match (&cfg.generator, &cfg.dir) {
        (Generator::Csv, Some(dir)) => read_split_dir(dir),
        _ => {
            let (train, val, test) = split(&cfg.generate()?, cfg.fractions, cfg.seed)?;
            Ok(Splits { train, val, test })
        }
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<CommandOutcome> {
    let splits = load_splits(&cfg.data, None)?;
    let mut w = Writer::new(out)?;
    let mut summary = Vec::new();
    for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let p = w.path(&format!("{name}.csv"));
        data::write_csv_dataset(ds, &p)?;
        summary.push(format!("{name}: {} rows -> {}", ds.len(), p.display()));
    }
    Ok(CommandOutcome {
        status: RunStatus::Completed,
        summary,
        files: w.files,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    #[serde(flatten)]
    status: &'a TrainStatus,
    members: usize,
    files: Vec<String>,
}

fn write_eval_block(
    w: &mut Writer,
    models: &[ModelParams],
    ds: &Dataset,
    name: &str,
    eval: &EvalSection,
) -> Result<MetricsReport> {
    let preds = predict(models, ds)?;
    let report = MetricsReport::compute(&preds, eval.bins)?;
    w.json(&format!("metrics_{name}.json"), &metrics_value(&report, &eval.metrics))?;
    w.text(
        &format!("reliability_{name}.csv"),
        &reliability_data(&preds, eval.bins)?.to_csv(),
    )?;
    Ok(report)
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, data_dir: Option<&Path>) -> Result<CommandOutcome> {
    let splits = load_splits(&cfg.data, data_dir)?;
    let spec = cfg.model.spec()?;
    let members = cfg.ensemble.n;
    let outcomes: Vec<TrainOutcome> = if members == 1 {
        vec![train(&spec, &splits.train, Some(&splits.val), &cfg.train)?]
    } else {
        train_ensemble(&spec, &splits.train, Some(&splits.val), &cfg.train, members)?
    };

    let mut w = Writer::new(out)?;
    w.text("config.toml", &cfg.to_toml()?)?;
    for (i, o) in outcomes.iter().enumerate() {
        let prefix = if members == 1 { String::new() } else { format!("member{i}_") };
        let ckpt = w.path(&format!("{prefix}checkpoint.json"));
        o.params.save(&ckpt)?;
        w.text(&format!("{prefix}train_log.jsonl"), &o.log.to_jsonl())?;
        if cfg.train.probe {
            w.text(&format!("{prefix}probes.csv"), &o.log.probes_csv())?;
        }
    }

    let mut summary = Vec::new();
    let diverged = outcomes.iter().find(|o| !o.is_complete());
    let status = diverged.map_or(TrainStatus::Completed, |o| o.status.clone());
    if let TrainStatus::Diverged { epoch, step, reason } = &status {
        summary.push(format!("diverged at epoch {epoch}, step {step}: {reason}"));
    } else {
        let models: Vec<ModelParams> = outcomes.iter().map(|o| o.params.clone()).collect();
        for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
            let r = write_eval_block(&mut w, &models, ds, name, &cfg.eval)?;
            summary.push(format!("{name}: acc {:.4} ece {:.4} nll {:.4}", r.acc, r.ece, r.nll));
        }
        for s in &cfg.shift.specs {
            let shifted = apply_shift(&splits.test, *s, cfg.shift.seed)?;
            let name = format!("test_{}", s.label());
            let r = write_eval_block(&mut w, &models, &shifted, &name, &cfg.eval)?;
            summary.push(format!("{name}: acc {:.4} ece {:.4}", r.acc, r.ece));
        }
        if cfg.posthoc.method != PosthocMethod::None {
            let val = predict(&models, &splits.val)?;
            let test = predict(&models, &splits.test)?;
            let report = calibrate_sets(&mut w, &val, &test, cfg.posthoc.method, cfg.eval.bins)?;
            summary.push(format!("{:?}: ece {:.4} -> {:.4}", cfg.posthoc.method, report.pre.ece, report.post.ece));
        }
    }
    let files = w
        .files
        .iter()
        .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
        .collect();
    w.json(
        "manifest.json",
        &Manifest {
            status: &status,
            members: members as usize,
            files,
        },
    )?;
    Ok(CommandOutcome {
        status: if status == TrainStatus::Completed {
            RunStatus::Completed
        } else {
            RunStatus::Diverged
        },
        summary,
        files: w.files,
    })
}

pub fn cmd_evaluate(checkpoint: &Path, datasets: &[PathBuf], bins: usize, out: &Path) -> Result<CommandOutcome> {
    if bins == 0 {
        return Err(Error::config("--bins must be >= 1"));
    }
    if datasets.is_empty() {
        return Err(Error::config("evaluate needs at least one dataset"));
    }
    let model = ModelParams::load(checkpoint)?;
    let loaded: Vec<(String, Dataset)> = datasets
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map_or_else(|| "data".to_string(), |s| s.to_string_lossy().into_owned());
            data::read_csv_dataset(p).map(|d| (name, d))
        })
        .collect::<Result<_>>()?;
    let eval = EvalSection {
        bins,
        metrics: all_metrics(),
    };
    let mut w = Writer::new(out)?;
    let mut summary = Vec::new();
    for (name, ds) in &loaded {
        let r = write_eval_block(&mut w, std::slice::from_ref(&model), ds, name, &eval)?;
        summary.push(format!("{name}: acc {:.4} ece {:.4} nll {:.4}", r.acc, r.ece, r.nll));
    }
    Ok(CommandOutcome {
        status: RunStatus::Completed,
        summary,
        files: w.files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: PosthocMethod,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub pre: MetricsReport,
    pub post: MetricsReport,
    /// Post-temperature ECE.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tce: Option<f64>,
}

fn calibrate_sets(
    w: &mut Writer,
    val: &PredictionSet,
    test: &PredictionSet,
    method: PosthocMethod,
    bins: usize,
) -> Result<CalibrationReport> {
    let calibrator: Calibrator = match method {
        PosthocMethod::Temperature => fit_temperature(val)?.into(),
        PosthocMethod::Isotonic => (&fit_isotonic(val)?).into(),
        PosthocMethod::None => return Err(Error::config("calibration method must be temperature or isotonic")),
    };
    let post = calibrator.apply(test)?;
    let pre_report = MetricsReport::compute(test, bins)?;
    let post_report = MetricsReport::compute(&post, bins)?;
    let temperature = match &calibrator {
        Calibrator::Temperature { temperature } => Some(*temperature),
        Calibrator::Isotonic { .. } => None,
    };
    let report = CalibrationReport {
        method,
        temperature,
        tce: temperature.map(|_| post_report.ece),
        pre: pre_report,
        post: post_report,
    };
    let p = w.path("calibrator.json");
    calibrator.save(&p)?;
    w.json("calibration_report.json", &report)?;
    w.text("reliability_pre.csv", &reliability_data(test, bins)?.to_csv())?;
    w.text("reliability_post.csv", &reliability_data(&post, bins)?.to_csv())?;
    Ok(report)
}

/// Fits on `val` and reports on `test`. With a checkpoint the two paths are
/// dataset CSVs; without one they are logits CSVs.
pub fn cmd_calibrate(
    checkpoint: Option<&Path>,
    val: &Path,
    test: &Path,
    method: PosthocMethod,
    bins: usize,
    out: &Path,
) -> Result<CommandOutcome> {
    if method == PosthocMethod::None {
        return Err(Error::config("calibration method must be temperature or isotonic"));
    }
    if bins == 0 {
        return Err(Error::config("--bins must be >= 1"));
    }
    let (val_set, test_set) = match checkpoint {
        Some(ckpt) => {
            let model = [ModelParams::load(ckpt)?];
            (
                predict(&model, &data::read_csv_dataset(val)?)?,
                predict(&model, &data::read_csv_dataset(test)?)?,
            )
        }
        None => (data::read_logits_csv(val)?, data::read_logits_csv(test)?),
    };
    let mut w = Writer::new(out)?;
    let r = calibrate_sets(&mut w, &val_set, &test_set, method, bins)?;
    let mut summary = vec![format!("ece {:.6} -> {:.6}", r.pre.ece, r.post.ece)];
    if let Some(t) = r.temperature {
        summary.push(format!("T = {t:.6}"));
    }
    Ok(CommandOutcome {
        status: RunStatus::Completed,
        summary,
        files: w.files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub theorem1: SuiteSummary,
    pub theorem2: BatchSuiteSummary,
    pub theorem3: SuiteSummary,
    pub lambda_monotone: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lemma1: Option<Lemma1Report>,
    pub violations: usize,
}

/// Batch-size-1 SAM run on the configured task, probing every step.
pub fn probe_run(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let splits = load_splits(&cfg.data, None)?;
    let spec = cfg.model.spec()?;
    let mut tc = TrainConfig::new(OptimizerKind::Sam, cfg.train.lr, cfg.theory.probe_epochs, 1);
    tc.rho = cfg.theory.probe_rho;
    tc.momentum = cfg.train.momentum;
    tc.seed = cfg.train.seed;
    tc.lr_schedule = cfg.train.lr_schedule;
    tc.probe = true;
    train(&spec, &splits.train, None, &tc)
}

/// Default task for the probe run when `theory` is invoked without a config.
pub fn default_probe_config() -> ExperimentConfig {
    let mut train = TrainConfig::new(OptimizerKind::Sam, 0.05, 10, 1);
    train.rho = 0.05;
    ExperimentConfig {
        data: DataSection {
            generator: Generator::TwoMoons,
            n: 300,
            noise_sd: 0.2,
            ..DataSection::default()
        },
        model: ModelSection {
            layer_sizes: vec![2, 16, 2],
            seed: 0,
        },
        train,
        eval: EvalSection::default(),
        posthoc: PosthocSection::default(),
        sweep: None,
        ensemble: EnsembleSection::default(),
        shift: ShiftSection::default(),
        theory: TheorySection::default(),
    }
}

pub fn cmd_theory(cfg: &ExperimentConfig, out: &Path, probe: bool) -> Result<CommandOutcome> {
    let t = &cfg.theory;
    let theorem1 = theorem1_suite(t.samples, t.seed)?;
    let theorem2 = theorem2_suite(t.batches, t.max_batch, t.seed.wrapping_add(1))?;
    let theorem3 = theorem3_suite(t.samples, t.seed.wrapping_add(2))?;
    let (rhos, p_tildes) = default_lambda_grid();
    let lambda_monotone = landscape_is_monotone(&rhos, &p_tildes);

    let mut w = Writer::new(out)?;
    w.text("lambda_landscape.csv", &lambda_csv(&lambda_landscape(&rhos, &p_tildes)))?;
    let mut summary = Vec::new();
    let lemma1 = if probe {
        let run = probe_run(cfg)?;
        w.text("probes.csv", &run.log.probes_csv())?;
        if let TrainStatus::Diverged { reason, .. } = &run.status {
            summary.push(format!("probe run diverged: {reason}"));
        }
        if run.log.probes.is_empty() {
            None
        } else {
            Some(lemma1_monitor_tail(&run.log.probes, t.probe_rho, t.probe_tail)?)
        }
    } else {
        None
    };
    let violations = theorem1.violations
        + theorem2.summary.violations
        + theorem3.violations
        + usize::from(!lambda_monotone);
    let report = TheoryReport {
        theorem1,
        theorem2,
        theorem3,
        lambda_monotone,
        lemma1,
        violations,
    };
    w.json("theory_summary.json", &report)?;

    summary.push(format!(
        "theorem1: {} samples, {} violations, min slack {:e}",
        report.theorem1.samples, report.theorem1.violations, report.theorem1.min_slack
    ));
    summary.push(format!(
        "theorem2: {} batches, {} violations, {} out of region, identity error {:e}",
        report.theorem2.summary.samples,
        report.theorem2.summary.violations,
        report.theorem2.out_of_region,
        report.theorem2.max_identity_error
    ));
    summary.push(format!(
        "theorem3: {} samples, {} violations, min slack {:e}",
        report.theorem3.samples, report.theorem3.violations, report.theorem3.min_slack
    ));
    summary.push(format!("lambda bound monotone: {}", report.lambda_monotone));
    if let Some(l) = &report.lemma1 {
        summary.push(format!(
            "probe: {} steps, p_tilde <= p on {:.3}, bound on {:.3}",
            l.steps, l.frac_decreased, l.frac_bound
        ));
    }
    for s in [&report.theorem1, &report.theorem3, &report.theorem2.summary] {
        for o in &s.offending {
            summary.push(format!("violation at {o:?}"));
        }
    }
    Ok(CommandOutcome {
        status: if violations == 0 {
            RunStatus::Completed
        } else {
            RunStatus::TheoryViolation
        },
        summary,
        files: w.files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    pub seed: u64,
    pub test_acc: Option<f64>,
    pub ece: Option<f64>,
    pub nll: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub status: String,
}

fn sweep_point(cfg: &ExperimentConfig, splits: &Splits, tc: TrainConfig, seed: u64, value: f64) -> SweepRow {
    let mut row = SweepRow {
        param: value,
        seed,
        test_acc: None,
        ece: None,
        nll: None,
        mean_entropy: None,
        status: String::new(),
    };
    let run = || -> Result<Option<(MetricsReport, f64)>> {
        let spec = cfg.model.spec()?.with_seed(seed);
        let tc = TrainConfig { seed, ..tc };
        let o = train(&spec, &splits.train, Some(&splits.val), &tc)?;
        if !o.is_complete() {
            return Ok(None);
        }
        let preds = predict(std::slice::from_ref(&o.params), &splits.test)?;
        let report = MetricsReport::compute(&preds, cfg.eval.bins)?;
        let ent = predictive_entropy(&preds.probs, &preds.labels)?;
        let mean = ent.iter().map(|e| e.true_label).sum::<f64>() / ent.len() as f64;
        Ok(Some((report, mean)))
    };
    match run() {
        Ok(Some((r, h))) => {
            row.test_acc = Some(r.acc);
            row.ece = Some(r.ece);
            row.nll = Some(r.nll);
            row.mean_entropy = Some(h);
            row.status = "ok".into();
        }
        Ok(None) => row.status = "diverged".into(),
        Err(e) => row.status = format!("error: {e}"),
    }
    row
}

pub fn sweep_csv(param: &str, rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::config(format!("cannot write sweep csv: {e}"));
    w.write_record(["param", "value", "seed", "test_acc", "ece", "nll", "mean_entropy", "status"])
        .map_err(fail)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in rows {
        w.write_record([
            param.to_string(),
            r.param.to_string(),
            r.seed.to_string(),
            opt(r.test_acc),
            opt(r.ece),
            opt(r.nll),
            opt(r.mean_entropy),
            r.status.clone(),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(format!("cannot write sweep csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One run per (value, seed); seeds are `train.seed + i`. Failed points are
/// kept as rows with an error status.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, data_dir: Option<&Path>) -> Result<CommandOutcome> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep requires a [sweep] section"))?;
    let points: Vec<(f64, TrainConfig, u64)> = sweep
        .values
        .iter()
        .map(|&v| sweep.apply(&cfg.train, v).map(|tc| (v, tc)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flat_map(|(v, tc)| (0..sweep.seeds as u64).map(move |i| (v, tc.clone(), i)))
        .collect();
    let splits = load_splits(&cfg.data, data_dir)?;
    let rows: Vec<SweepRow> = points
        .into_par_iter()
        .map(|(v, tc, i)| {
            let seed = cfg.train.seed.wrapping_add(i);
            sweep_point(cfg, &splits, tc, seed, v)
        })
        .collect();

    let mut w = Writer::new(out)?;
    w.text("sweep.csv", &sweep_csv(sweep.name(), &rows)?)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    let mut summary = vec![format!("{} runs, {failed} failed", rows.len())];
    for &v in &sweep.values {
        let mut hs: Vec<f64> = rows
            .iter()
            .filter(|r| r.param == v)
            .filter_map(|r| r.mean_entropy)
            .collect();
        if hs.is_empty() {
            continue;
        }
        hs.sort_by(f64::total_cmp);
        summary.push(format!("{}={v}: median mean H(p_y) {:.4}", sweep.name(), hs[hs.len() / 2]));
    }
    Ok(CommandOutcome {
        status: RunStatus::Completed,
        summary,
        files: w.files,
    })
}
