//! Calibration and discrimination metrics over a set of predictions.
//!
//! Equal-width bins are left-open and right-closed: sample `j` with top-label
//! confidence `c` falls in bin `i` (1-based) when `(i-1)/M < c <= i/M`, and
//! `c = 0` goes to the first bin. Per-bin sums are accumulated in sample
//! order, so the binned estimator agrees bit for bit with a direct evaluation
//! of the definition.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::ModelParams;
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default number of confidence bins.
pub const DEFAULT_BINS: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `[n × K]` softmax outputs.
    pub probs: Tensor,
    pub labels: Vec<usize>,
    pub logits: Option<Tensor>,
}

impl PredictionSet {
    pub fn from_probs(probs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let set = PredictionSet {
            probs,
            labels,
            logits: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn from_logits(logits: Tensor, labels: Vec<usize>) -> Result<Self> {
        if !logits.all_finite() {
            return Err(Error::non_finite("logits"));
        }
        let probs = logits.softmax()?;
        let set = PredictionSet {
            probs,
            labels,
            logits: Some(logits),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = self.probs.dims2()?;
        if self.labels.len() != n {
            return Err(Error::shape(format!("{n} prediction rows but {} labels", self.labels.len())));
        }
        if let Some(l) = &self.logits {
            if l.shape() != self.probs.shape() {
                return Err(Error::shape("logits and probabilities differ in shape"));
            }
        }
        for (i, row) in self.probs.row_iter().enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::domain(format!(
                    "row {i} is not a probability vector (sums to {total})"
                )));
            }
        }
        if let Some((i, y)) = self.labels.iter().enumerate().find(|(_, &y)| y >= k) {
            return Err(Error::config(format!("label {y} at row {i} outside [0, {k})")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    /// Argmax per row; the lowest index wins ties.
    pub fn predicted(&self) -> Vec<usize> {
        self.probs.row_iter().map(argmax).collect()
    }

    /// `max_k p_k` per row.
    pub fn confidences(&self) -> Vec<f64> {
        self.probs
            .row_iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn correct(&self) -> Vec<bool> {
        self.predicted()
            .into_iter()
            .zip(&self.labels)
            .map(|(p, &y)| p == y)
            .collect()
    }

    /// `p_y` per row.
    pub fn true_label_probs(&self) -> Vec<f64> {
        self.probs
            .row_iter()
            .zip(&self.labels)
            .map(|(r, &y)| r[y])
            .collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Summary of one confidence bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence, 0 for an empty bin.
    pub avg_conf: f64,
    /// Empirical accuracy, 0 for an empty bin.
    pub avg_acc: f64,
}

impl Bin {
    pub fn gap(&self) -> f64 {
        self.avg_acc - self.avg_conf
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bins: Vec<Bin>,
    pub n: usize,
}

impl BinStats {
    /// `Σ_i (|B_i| / n) |acc(B_i) - conf(B_i)|`
    pub fn weighted_gap(&self) -> f64 {
        let n = self.n as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.count as f64 / n) * (b.avg_acc - b.avg_conf).abs())
            .sum()
    }
}

/// Equal-width bin (0-based) for confidence `c`.
pub fn bin_index(c: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut i = ((c * m).ceil() as usize).clamp(1, bins);
    // ceil(c*M) can be one off from the boundary test under rounding
    while i > 1 && c <= (i - 1) as f64 / m {
        i -= 1;
    }
    while i < bins && c > i as f64 / m {
        i += 1;
    }
    i - 1
}

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::config("number of bins must be at least 1"));
    }
    Ok(())
}

fn equal_width_stats(scores: &[f64], hits: &[f64], bins: usize) -> BinStats {
    let mut counts = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    for (&c, &h) in scores.iter().zip(hits) {
        let b = bin_index(c, bins);
        counts[b] += 1;
        conf[b] += c;
        acc[b] += h;
    }
    let m = bins as f64;
    let bins = (0..bins)
        .map(|i| {
            let n = counts[i];
            let (avg_conf, avg_acc) = if n > 0 {
                (conf[i] / n as f64, acc[i] / n as f64)
            } else {
                (0.0, 0.0)
            };
            Bin {
                lower: i as f64 / m,
                upper: (i + 1) as f64 / m,
                count: n,
                avg_conf,
                avg_acc,
            }
        })
        .collect();
    BinStats {
        bins,
        n: scores.len(),
    }
}

fn hits(correct: &[bool]) -> Vec<f64> {
    correct.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
}

/// Top-label ECE with `bins` equal-width bins.
pub fn ece(preds: &PredictionSet, bins: usize) -> Result<(f64, BinStats)> {
    check_bins(bins)?;
    if preds.is_empty() {
        return Err(Error::config("ECE of an empty prediction set"));
    }
    let stats = equal_width_stats(&preds.confidences(), &hits(&preds.correct()), bins);
    Ok((stats.weighted_gap(), stats))
}

/// Adaptive (equal-mass) ECE.
///
/// Samples are stably sorted by confidence and cut into `bins` contiguous
/// groups whose sizes differ by at most one, larger groups first.
pub fn ada_ece(preds: &PredictionSet, bins: usize) -> Result<(f64, BinStats)> {
    check_bins(bins)?;
    let n = preds.len();
    if n < bins {
        return Err(Error::config(format!("adaptive ECE needs n >= M, got n={n}, M={bins}")));
    }
    let conf = preds.confidences();
    let hit = hits(&preds.correct());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));

    let base = n / bins;
    let extra = n % bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for i in 0..bins {
        let size = base + usize::from(i < extra);
        let idx = &order[start..start + size];
        let c: f64 = idx.iter().map(|&j| conf[j]).sum();
        let a: f64 = idx.iter().map(|&j| hit[j]).sum();
        out.push(Bin {
            lower: conf[idx[0]],
            upper: conf[idx[size - 1]],
            count: size,
            avg_conf: c / size as f64,
            avg_acc: a / size as f64,
        });
        start += size;
    }
    let stats = BinStats { bins: out, n };
    Ok((stats.weighted_gap(), stats))
}

/// Mean over classes of the equal-width ECE of column `k` against `[y = k]`.
pub fn classwise_ece(preds: &PredictionSet, bins: usize) -> Result<f64> {
    check_bins(bins)?;
    if preds.is_empty() {
        return Err(Error::config("classwise ECE of an empty prediction set"));
    }
    let k = preds.classes();
    let mut total = 0.0;
    for class in 0..k {
        let scores: Vec<f64> = preds.probs.row_iter().map(|r| r[class]).collect();
        let indicator: Vec<f64> = preds
            .labels
            .iter()
            .map(|&y| if y == class { 1.0 } else { 0.0 })
            .collect();
        total += equal_width_stats(&scores, &indicator, bins).weighted_gap();
    }
    Ok(total / k as f64)
}

/// Mean `-ln max(p_y, 1e-12)`.
pub fn nll(preds: &PredictionSet) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::config("NLL of an empty prediction set"));
    }
    let total: f64 = preds
        .true_label_probs()
        .iter()
        .map(|p| -p.max(PROB_FLOOR).ln())
        .sum();
    Ok(total / preds.len() as f64)
}

pub fn accuracy(preds: &PredictionSet) -> f64 {
    let c = preds.correct();
    c.iter().filter(|&&x| x).count() as f64 / c.len().max(1) as f64
}

/// Mann-Whitney AUROC; tied scores count one half.
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            positives.len()
        )));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::domain("AUROC needs at least one positive and one negative"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::non_finite("AUROC score is NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of average ranks (1-based) of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positives[idx] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Misclassification detection: top confidence scores, correct predictions positive.
pub fn auroc_misclassification(preds: &PredictionSet) -> Result<f64> {
    auroc(&preds.confidences(), &preds.correct())
}

/// OOD detection: top confidence scores, in-distribution samples positive.
pub fn auroc_ood(in_dist: &PredictionSet, out_dist: &PredictionSet) -> Result<f64> {
    let mut scores = in_dist.confidences();
    scores.extend(out_dist.confidences());
    let mut positive = vec![true; in_dist.len()];
    positive.extend(std::iter::repeat_n(false, out_dist.len()));
    auroc(&scores, &positive)
}

/// Reliability-diagram data: per-bin statistics and the confidence histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityData {
    pub stats: BinStats,
}

impl ReliabilityData {
    pub fn gaps(&self) -> Vec<f64> {
        self.stats.bins.iter().map(Bin::gap).collect()
    }

    pub fn histogram(&self) -> Vec<usize> {
        self.stats.bins.iter().map(|b| b.count).collect()
    }

    /// Columns `bin_low,bin_high,count,avg_conf,avg_acc,gap`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,count,avg_conf,avg_acc,gap\n");
        for b in &self.stats.bins {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                b.lower,
                b.upper,
                b.count,
                b.avg_conf,
                b.avg_acc,
                b.gap()
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn reliability_data(preds: &PredictionSet, bins: usize) -> Result<ReliabilityData> {
    let (_, stats) = ece(preds, bins)?;
    Ok(ReliabilityData { stats })
}

/// The metric block written per evaluated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub ece: f64,
    pub ada_ece: Option<f64>,
    pub classwise_ece: f64,
    pub nll: f64,
    pub auroc_misclass: Option<f64>,
    pub n: usize,
    #[serde(rename = "M")]
    pub bins: usize,
}

impl MetricsReport {
    /// `ada_ece` is omitted when `n < M`; `auroc_misclass` when every
    /// prediction is right (or every one wrong).
    pub fn compute(preds: &PredictionSet, bins: usize) -> Result<Self> {
        Ok(MetricsReport {
            acc: accuracy(preds),
            ece: ece(preds, bins)?.0,
            ada_ece: ada_ece(preds, bins).ok().map(|r| r.0),
            classwise_ece: classwise_ece(preds, bins)?,
            nll: nll(preds)?,
            auroc_misclass: auroc_misclassification(preds).ok(),
            n: preds.len(),
            bins,
        })
    }
}

/// Mean of member softmax outputs.
///
/// The logits of the result are `ln p̄` (floored at `PROB_FLOOR`), whose
/// softmax is `p̄` again, so temperature scaling applies to ensembles too.
pub fn ensemble_predict(members: &[ModelParams], features: &Tensor, labels: &[usize]) -> Result<PredictionSet> {
    let first = members
        .first()
        .ok_or_else(|| Error::config("an ensemble needs at least one member"))?;
    if let Some(m) = members.iter().find(|m| m.spec().layer_sizes != first.spec().layer_sizes) {
        return Err(Error::shape(format!(
            "ensemble members disagree: {:?} vs {:?}",
            first.spec().layer_sizes,
            m.spec().layer_sizes
        )));
    }
    let mut sum: Option<Tensor> = None;
    for m in members {
        let p = m.forward(features)?.softmax()?;
        match sum.as_mut() {
            None => sum = Some(p),
            Some(s) => s.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b),
        }
    }
    let mut probs = sum.expect("non-empty");
    if members.len() > 1 {
        let inv = members.len() as f64;
        probs.data_mut().iter_mut().for_each(|v| *v /= inv);
    }
    let mut logits = probs.clone();
    logits.data_mut().iter_mut().for_each(|v| *v = v.max(PROB_FLOOR).ln());
    let mut set = PredictionSet::from_probs(probs, labels.to_vec())?;
    set.logits = Some(logits);
    Ok(set)
}
