//! Post-hoc calibrators fitted on a validation split: temperature scaling and
//! isotonic regression of top-label confidence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PredictionSet;
use crate::tensor::{log_softmax_row, Tensor};

const LN_T_MAX: f64 = 4.605_170_185_988_092; // ln 100
const GOLDEN_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    #[serde(rename = "T")]
    pub temperature: f64,
}

impl TemperatureModel {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(TemperatureModel { temperature })
    }
}

impl Default for TemperatureModel {
    fn default() -> Self {
        TemperatureModel { temperature: 1.0 }
    }
}

fn logits_of(preds: &PredictionSet) -> Result<&Tensor> {
    preds
        .logits
        .as_ref()
        .ok_or_else(|| Error::config("temperature scaling needs logits"))
}

/// Validation NLL of `softmax(logits / T)`, computed in log space.
pub fn temperature_nll(logits: &Tensor, labels: &[usize], temperature: f64) -> Result<f64> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n || n == 0 {
        return Err(Error::shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    let inv = 1.0 / temperature;
    let mut row = vec![0.0; k];
    let mut total = 0.0;
    for (r, &y) in logits.row_iter().zip(labels) {
        row.iter_mut().zip(r).for_each(|(d, s)| *d = s * inv);
        log_softmax_row(&mut row);
        total -= row[y];
    }
    Ok(total / n as f64)
}

/// Minimizes validation NLL over `ln T ∈ [-ln 100, ln 100]` by golden-section search.
///
/// Falls back to `T = 1` when every row's logits are constant (the NLL does not
/// depend on `T`) or when the search result is not better than `T = 1`.
pub fn fit_temperature(val: &PredictionSet) -> Result<TemperatureModel> {
    let logits = logits_of(val)?;
    if val.len() < 2 {
        return Err(Error::config("temperature fitting needs at least 2 samples"));
    }
    let degenerate = logits
        .row_iter()
        .all(|r| r.iter().all(|&v| v == r[0]));
    if degenerate {
        log::warn!("all logits are constant within rows; keeping T = 1");
        return Ok(TemperatureModel::default());
    }
    let f = |u: f64| temperature_nll(logits, &val.labels, u.exp());

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-LN_T_MAX, LN_T_MAX);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    let u = 0.5 * (a + b);
    let t = u.exp();
    if f(u)? > temperature_nll(logits, &val.labels, 1.0)? {
        return Ok(TemperatureModel::default());
    }
    TemperatureModel::new(t)
}

pub fn apply_temperature(preds: &PredictionSet, model: &TemperatureModel) -> Result<PredictionSet> {
    let logits = logits_of(preds)?;
    let inv = 1.0 / model.temperature;
    let mut scaled = logits.clone();
    scaled.data_mut().iter_mut().for_each(|v| *v *= inv);
    let probs = scaled.softmax()?;
    Ok(PredictionSet {
        probs,
        labels: preds.labels.clone(),
        logits: Some(logits.clone()),
    })
}

/// Weighted pool-adjacent-violators: the non-decreasing sequence closest to
/// `targets` in weighted least squares.
pub fn pav(targets: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if targets.len() != weights.len() {
        return Err(Error::shape("targets and weights differ in length"));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::config("PAV weights must be positive"));
    }
    // blocks of (weighted mean, total weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(targets.len());
    for (&y, &w) in targets.iter().zip(weights) {
        blocks.push((y, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let wt = w1 + w2;
            *blocks.last_mut().unwrap() = ((m1 * w1 + m2 * w2) / wt, wt, n1 + n2);
        }
    }
    Ok(blocks
        .into_iter()
        .flat_map(|(m, _, n)| std::iter::repeat_n(m, n))
        .collect())
}

/// Non-decreasing step function from confidence to calibrated accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct IsotonicModel {
    /// `(threshold, value)` sorted by threshold; a confidence `c` maps to the
    /// value of the first threshold `>= c`, or the last value beyond the end.
    breakpoints: Vec<(f64, f64)>,
}

impl IsotonicModel {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(Error::config("isotonic model needs at least one breakpoint"));
        }
        for w in breakpoints.windows(2) {
            if !(w[0].0 < w[1].0) || w[0].1 > w[1].1 {
                return Err(Error::config(
                    "isotonic breakpoints must have increasing thresholds and non-decreasing values",
                ));
            }
        }
        if breakpoints.iter().any(|&(_, v)| !(0.0..=1.0).contains(&v)) {
            return Err(Error::config("isotonic values must lie in [0, 1]"));
        }
        Ok(IsotonicModel { breakpoints })
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn predict(&self, c: f64) -> f64 {
        let i = self.breakpoints.partition_point(|&(t, _)| t < c);
        self.breakpoints
            .get(i)
            .unwrap_or_else(|| self.breakpoints.last().unwrap())
            .1
    }
}

/// Fits a monotone map from top-label confidence to correctness.
///
/// Samples with equal confidence are merged first, so each threshold appears
/// once with weight equal to its multiplicity.
pub fn fit_isotonic(val: &PredictionSet) -> Result<IsotonicModel> {
    if val.len() < 2 {
        return Err(Error::config("isotonic fitting needs at least 2 samples"));
    }
    let conf = val.confidences();
    let correct = val.correct();
    let mut pairs: Vec<(f64, f64)> = conf
        .iter()
        .zip(&correct)
        .map(|(&c, &ok)| (c, if ok { 1.0 } else { 0.0 }))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut xs: Vec<f64> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (c, y) in pairs {
        if xs.last() == Some(&c) {
            *sums.last_mut().unwrap() += y;
            *weights.last_mut().unwrap() += 1.0;
        } else {
            xs.push(c);
            sums.push(y);
            weights.push(1.0);
        }
    }
    let means: Vec<f64> = sums.iter().zip(&weights).map(|(s, w)| s / w).collect();
    let fitted = pav(&means, &weights)?;
    IsotonicModel::new(xs.into_iter().zip(fitted).collect())
}

const ISO_FLOOR: f64 = 1e-12;

/// Replaces each row's top probability with the isotonic value and spreads the
/// remaining mass over the other classes in proportion to their original
/// probabilities.
pub fn apply_isotonic(preds: &PredictionSet, model: &IsotonicModel) -> Result<PredictionSet> {
    let (_, k) = preds.probs.dims2()?;
    let mut probs = preds.probs.clone();
    for row in probs.data_mut().chunks_mut(k) {
        let top = crate::metrics::argmax(row);
        let c = row[top];
        let v = model.predict(c).clamp(ISO_FLOOR, 1.0);
        let rest = 1.0 - c;
        for (j, p) in row.iter_mut().enumerate() {
            if j == top {
                *p = v;
            } else if rest > 0.0 {
                *p *= (1.0 - v) / rest;
            } else {
                *p = (1.0 - v) / (k - 1) as f64;
            }
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    Ok(PredictionSet {
        probs,
        labels: preds.labels.clone(),
        logits: preds.logits.clone(),
    })
}

/// Serialized form of a fitted calibrator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibrator {
    Temperature {
        #[serde(rename = "T")]
        temperature: f64,
    },
    Isotonic { breakpoints: Vec<[f64; 2]> },
}

impl Calibrator {
    pub fn apply(&self, preds: &PredictionSet) -> Result<PredictionSet> {
        match self {
            Calibrator::Temperature { temperature } => {
                apply_temperature(preds, &TemperatureModel::new(*temperature)?)
            }
            Calibrator::Isotonic { breakpoints } => {
                let model = IsotonicModel::new(breakpoints.iter().map(|p| (p[0], p[1])).collect())?;
                apply_isotonic(preds, &model)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("calibrator serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

impl From<TemperatureModel> for Calibrator {
    fn from(m: TemperatureModel) -> Self {
        Calibrator::Temperature {
            temperature: m.temperature,
        }
    }
}

impl From<&IsotonicModel> for Calibrator {
    fn from(m: &IsotonicModel) -> Self {
        Calibrator::Isotonic {
            breakpoints: m.breakpoints.iter().map(|&(c, v)| [c, v]).collect(),
        }
    }
}
