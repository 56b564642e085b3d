//! Classification losses on log-probabilities and the entropy helpers used by
//! the regularization analysis.
//!
//! Every loss here is a per-example function of the true-label log-probability
//! `lp = ln p_y`, so the tape only needs one elementwise node with the
//! derivative `d loss / d lp` saved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// `-(1 - p)^gamma ln p`
    Focal { gamma: f64 },
    /// Outer loss of CSAM: cross-entropy below `p = 1/2`, damped by
    /// `(1 + p)^-gamma` above it.
    CsamOuter { gamma: f64 },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::CrossEntropy => Ok(()),
            LossKind::Focal { gamma } if gamma >= 0.0 && gamma.is_finite() => Ok(()),
            LossKind::Focal { gamma } => {
                Err(Error::config(format!("focal gamma must be >= 0, got {gamma}")))
            }
            LossKind::CsamOuter { gamma } if (0.0..=2.0).contains(&gamma) => Ok(()),
            LossKind::CsamOuter { gamma } => {
                Err(Error::config(format!("CSAM gamma must lie in [0, 2], got {gamma}")))
            }
        }
    }

    /// `(loss, d loss / d lp)` at true-label log-probability `lp`.
    pub fn eval(&self, lp: f64) -> (f64, f64) {
        match *self {
            LossKind::CrossEntropy => (-lp, -1.0),
            LossKind::Focal { gamma } => {
                if gamma == 0.0 {
                    return (-lp, -1.0);
                }
                let p = lp.exp();
                let q = 1.0 - p;
                let w = q.powf(gamma);
                // d/dlp of (1-p)^g is -g (1-p)^(g-1) p; the term vanishes when q = 0
                let dw = if q > 0.0 {
                    -gamma * q.powf(gamma - 1.0) * p
                } else {
                    0.0
                };
                (-w * lp, -w - dw * lp)
            }
            LossKind::CsamOuter { gamma } => {
                let p = lp.exp();
                if p <= 0.5 {
                    return (-lp, -1.0);
                }
                let c = (1.0 + p).powf(-gamma);
                let dc = -gamma * (1.0 + p).powf(-gamma - 1.0) * p;
                (-c * lp, -c - dc * lp)
            }
        }
    }
}

/// Batch loss: the mean and every per-example value.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub mean: f64,
    pub per_example: Vec<f64>,
}

fn true_label_log_probs(log_probs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (m, k) = log_probs.dims2()?;
    if labels.len() != m {
        return Err(Error::shape(format!("{m} rows but {} labels", labels.len())));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= k {
                Err(Error::config(format!("label {y} at row {i} outside [0, {k})")))
            } else {
                Ok(log_probs.data()[i * k + y])
            }
        })
        .collect()
}

pub fn loss(kind: LossKind, log_probs: &Tensor, labels: &[usize]) -> Result<LossValue> {
    kind.validate()?;
    let lps = true_label_log_probs(log_probs, labels)?;
    if lps.is_empty() {
        return Err(Error::shape("loss over an empty batch"));
    }
    let per_example: Vec<f64> = lps.iter().map(|&lp| kind.eval(lp).0).collect();
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(LossValue { mean, per_example })
}

pub fn cross_entropy(log_probs: &Tensor, labels: &[usize]) -> Result<LossValue> {
    loss(LossKind::CrossEntropy, log_probs, labels)
}

pub fn focal_loss(log_probs: &Tensor, labels: &[usize], gamma: f64) -> Result<LossValue> {
    loss(LossKind::Focal { gamma }, log_probs, labels)
}

pub fn csam_outer_loss(log_probs: &Tensor, labels: &[usize], gamma: f64) -> Result<LossValue> {
    loss(LossKind::CsamOuter { gamma }, log_probs, labels)
}

/// Records the mean loss of `kind` on the tape; `log_probs` is `[m × K]`.
pub fn loss_on_tape(tape: &mut Tape, kind: LossKind, log_probs: Var, labels: &[usize]) -> Result<Var> {
    kind.validate()?;
    let picked = tape.pick(log_probs, labels)?;
    let per_example = tape.map(picked, |lp| kind.eval(lp))?;
    tape.mean(per_example)
}

/// `-p ln p - (1-p) ln(1-p)`, with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("binary entropy needs p in [0, 1], got {p}")));
    }
    Ok(xlnx(p) + xlnx(1.0 - p))
}

fn xlnx(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Per-example entropies of a predictive distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExampleEntropy {
    /// `H(p_y)`: binary entropy of the true-label probability.
    pub true_label: f64,
    /// `-Σ_k p_k ln p_k`
    pub categorical: f64,
}

pub fn predictive_entropy(probs: &Tensor, labels: &[usize]) -> Result<Vec<ExampleEntropy>> {
    let (m, k) = probs.dims2()?;
    if labels.len() != m {
        return Err(Error::shape(format!("{m} rows but {} labels", labels.len())));
    }
    let mut out = Vec::with_capacity(m);
    for (i, (row, &y)) in probs.row_iter().zip(labels).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::domain(format!(
                "row {i} is not a probability vector (sums to {total})"
            )));
        }
        if y >= k {
            return Err(Error::config(format!("label {y} at row {i} outside [0, {k})")));
        }
        out.push(ExampleEntropy {
            true_label: binary_entropy(row[y].min(1.0))?,
            categorical: row.iter().map(|&p| xlnx(p)).sum(),
        });
    }
    Ok(out)
}
