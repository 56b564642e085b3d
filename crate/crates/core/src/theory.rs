//! Numerical checks of the entropy-regularization inequalities satisfied by a
//! SAM perturbation, the λ coefficient and its lower bound, and an empirical
//! monitor for how the true-label probability changes under the perturbation.
//!
//! Notation: `p` is the true-label probability at the current weights and
//! `p_tilde` the same probability at the perturbed weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::binary_entropy;

/// Rounding allowance for the inequality checks; exact in real arithmetic.
pub const SLACK_TOLERANCE: f64 = 1e-10;

/// Margin kept from 0 and 1 when clamping probe probabilities.
pub const PROB_MARGIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePair {
    pub p: f64,
    pub p_tilde: f64,
}

impl ProbePair {
    /// Clamps both probabilities into `[1e-12, 1 - 1e-12]`.
    pub fn new(p: f64, p_tilde: f64) -> Result<Self> {
        if !(p.is_finite() && p_tilde.is_finite()) {
            return Err(Error::non_finite(format!("probe pair ({p}, {p_tilde})")));
        }
        let clamp = |v: f64| v.clamp(PROB_MARGIN, 1.0 - PROB_MARGIN);
        Ok(ProbePair {
            p: clamp(p),
            p_tilde: clamp(p_tilde),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub holds: bool,
    /// LHS − RHS of the inequality.
    pub slack: f64,
}

impl CheckOutcome {
    fn from_slack(slack: f64) -> Self {
        CheckOutcome {
            holds: slack >= -SLACK_TOLERANCE,
            slack,
        }
    }
}

fn check_open_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::domain(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

/// `λ = (1 - p_tilde) / (1 - p)`
pub fn lambda_of(p: f64, p_tilde: f64) -> Result<f64> {
    check_open_unit("p", p)?;
    check_open_unit("p_tilde", p_tilde)?;
    Ok((1.0 - p_tilde) / (1.0 - p))
}

/// `(1 - p_tilde) / (1 - e^{ρ/2} p_tilde)`, defined while `e^{ρ/2} p_tilde < 1`.
pub fn lambda_lower_bound(rho: f64, p_tilde: f64) -> Result<f64> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::domain(format!("rho must be >= 0, got {rho}")));
    }
    check_open_unit("p_tilde", p_tilde)?;
    let scaled = (rho / 2.0).exp() * p_tilde;
    if scaled >= 1.0 {
        return Err(Error::domain(format!(
            "e^(rho/2) * p_tilde = {scaled} >= 1; the bound diverges (rho = {rho}, p_tilde = {p_tilde})"
        )));
    }
    Ok((1.0 - p_tilde) / (1.0 - scaled))
}

// -ln p + (coef * H(p_tilde) - λ H(p))
fn entropy_rhs(pair: &ProbePair, coef: f64) -> Result<f64> {
    let lambda = lambda_of(pair.p, pair.p_tilde)?;
    let h_p = binary_entropy(pair.p)?;
    let h_pt = binary_entropy(pair.p_tilde)?;
    Ok(-pair.p.ln() + (coef * h_pt - lambda * h_p))
}

/// `-ln p_tilde >= -ln p - λ H(p) + H(p_tilde)`.
///
/// Evaluated for any pair; the inequality is guaranteed only when `p_tilde <= p`.
pub fn check_theorem1(pair: &ProbePair) -> Result<CheckOutcome> {
    let lhs = -pair.p_tilde.ln();
    Ok(CheckOutcome::from_slack(lhs - entropy_rhs(pair, 1.0)?))
}

/// `-(1 + p_tilde)^{-γ} ln p_tilde >= -ln p - λ H(p) + (1 - γ/2) H(p_tilde)`.
///
/// Inputs outside the hypothesis region (`p_tilde > 1/2`, `p >= p_tilde`,
/// `γ ∈ [0, 2]`) are rejected with a domain error.
pub fn check_theorem3(pair: &ProbePair, gamma: f64) -> Result<CheckOutcome> {
    if !(0.0..=2.0).contains(&gamma) {
        return Err(Error::domain(format!("gamma must lie in [0, 2], got {gamma}")));
    }
    if !(pair.p_tilde > 0.5) {
        return Err(Error::domain(format!("requires p_tilde > 1/2, got {}", pair.p_tilde)));
    }
    if pair.p < pair.p_tilde {
        return Err(Error::domain(format!(
            "requires p >= p_tilde, got p = {}, p_tilde = {}",
            pair.p, pair.p_tilde
        )));
    }
    let lhs = -(1.0 + pair.p_tilde).powf(-gamma) * pair.p_tilde.ln();
    let coef = 1.0 - gamma / 2.0;
    Ok(CheckOutcome::from_slack(lhs - entropy_rhs(pair, coef)?))
}

/// `exp(mean(ln v))`; returns the common value exactly when all entries agree.
pub fn geometric_mean(values: &[f64]) -> Result<f64> {
    let first = *values
        .first()
        .ok_or_else(|| Error::config("geometric mean of an empty list"))?;
    if values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::domain("geometric mean needs positive values"));
    }
    if values.iter().all(|&v| v == first) {
        return Ok(first);
    }
    let mean_log = values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64;
    Ok(mean_log.exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchCheck {
    pub outcome: CheckOutcome,
    pub p_mean: f64,
    pub p_tilde_mean: f64,
    /// `|mean(-ln p_i) - (-ln p_mean)|`, the batch-loss identity residual.
    pub identity_error: f64,
}

/// Mini-batch version: applies [`check_theorem1`] to the geometric means.
pub fn check_theorem2(pairs: &[ProbePair]) -> Result<BatchCheck> {
    if pairs.is_empty() {
        return Err(Error::config("batch check needs at least one pair"));
    }
    let ps: Vec<f64> = pairs.iter().map(|q| q.p).collect();
    let pts: Vec<f64> = pairs.iter().map(|q| q.p_tilde).collect();
    let mean = ProbePair {
        p: geometric_mean(&ps)?,
        p_tilde: geometric_mean(&pts)?,
    };
    let outcome = check_theorem1(&mean)?;
    let batch_loss = ps.iter().map(|p| -p.ln()).sum::<f64>() / ps.len() as f64;
    let batch_loss_tilde = pts.iter().map(|p| -p.ln()).sum::<f64>() / pts.len() as f64;
    let identity_error = (batch_loss + mean.p.ln())
        .abs()
        .max((batch_loss_tilde + mean.p_tilde.ln()).abs());
    Ok(BatchCheck {
        outcome,
        p_mean: mean.p,
        p_tilde_mean: mean.p_tilde,
        identity_error,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub rho: f64,
    pub p_tilde: f64,
    pub lambda_lb: f64,
}

/// Default grid: `ρ ∈ {0, 0.05, …, 1.0}`, `p_tilde ∈ {0.05, …, 0.95}`.
pub fn default_lambda_grid() -> (Vec<f64>, Vec<f64>) {
    let rhos = (0..=20).map(|i| i as f64 * 0.05).collect();
    let pts = (1..=19).map(|i| i as f64 * 0.05).collect();
    (rhos, pts)
}

/// Lower bound on the grid, skipping points outside its domain.
pub fn lambda_landscape(rhos: &[f64], p_tildes: &[f64]) -> Vec<LambdaPoint> {
    let mut out = Vec::new();
    for &rho in rhos {
        for &p_tilde in p_tildes {
            if let Ok(lambda_lb) = lambda_lower_bound(rho, p_tilde) {
                out.push(LambdaPoint {
                    rho,
                    p_tilde,
                    lambda_lb,
                });
            }
        }
    }
    out
}

/// True when the bound is non-decreasing along every ρ-line and p_tilde-line
/// of the grid, comparing only neighbouring points that are both defined.
pub fn landscape_is_monotone(rhos: &[f64], p_tildes: &[f64]) -> bool {
    let at = |r: f64, p: f64| lambda_lower_bound(r, p).ok();
    for &p in p_tildes {
        for w in rhos.windows(2) {
            if let (Some(a), Some(b)) = (at(w[0], p), at(w[1], p)) {
                if b < a {
                    return false;
                }
            }
        }
    }
    for &r in rhos {
        for w in p_tildes.windows(2) {
            if let (Some(a), Some(b)) = (at(r, w[0]), at(r, w[1])) {
                if b < a {
                    return false;
                }
            }
        }
    }
    true
}

pub fn lambda_csv(points: &[LambdaPoint]) -> String {
    let mut s = String::from("rho,p_tilde,lambda_lb\n");
    for pt in points {
        s.push_str(&format!("{},{},{}\n", pt.rho, pt.p_tilde, pt.lambda_lb));
    }
    s
}

/// Outcome of a sampled inequality sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub samples: usize,
    pub violations: usize,
    pub min_slack: f64,
    /// Up to 10 offending inputs, as `[p, p_tilde, gamma]`.
    pub offending: Vec<[f64; 3]>,
}

impl SuiteSummary {
    fn new() -> Self {
        SuiteSummary {
            samples: 0,
            violations: 0,
            min_slack: f64::INFINITY,
            offending: Vec::new(),
        }
    }

    fn record(&mut self, outcome: CheckOutcome, inputs: [f64; 3]) {
        self.samples += 1;
        self.min_slack = self.min_slack.min(outcome.slack);
        if !outcome.holds {
            self.violations += 1;
            if self.offending.len() < 10 {
                self.offending.push(inputs);
            }
        }
    }
}

const SAMPLE_LO: f64 = 1e-9;
const SAMPLE_HI: f64 = 1.0 - 1e-9;

/// Uniform `(p, p_tilde)` in `[1e-9, 1 - 1e-9]` with `p_tilde <= p`.
pub fn theorem1_suite(samples: usize, seed: u64) -> Result<SuiteSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = SuiteSummary::new();
    for _ in 0..samples {
        let a = rng.random_range(SAMPLE_LO..=SAMPLE_HI);
        let b = rng.random_range(SAMPLE_LO..=SAMPLE_HI);
        let pair = ProbePair::new(a.max(b), a.min(b))?;
        summary.record(check_theorem1(&pair)?, [pair.p, pair.p_tilde, 0.0]);
    }
    Ok(summary)
}

/// `p_tilde ∈ (1/2, 1)`, `p ∈ [p_tilde, 1)`, `γ ∈ [0, 2]`.
pub fn theorem3_suite(samples: usize, seed: u64) -> Result<SuiteSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = SuiteSummary::new();
    let mut drawn = 0;
    while drawn < samples {
        let p_tilde = rng.random_range(0.5..SAMPLE_HI);
        if p_tilde <= 0.5 {
            continue;
        }
        let p = rng.random_range(p_tilde..=SAMPLE_HI);
        let gamma = rng.random_range(0.0..=2.0);
        let pair = ProbePair::new(p, p_tilde)?;
        summary.record(check_theorem3(&pair, gamma)?, [pair.p, pair.p_tilde, gamma]);
        drawn += 1;
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSuiteSummary {
    pub summary: SuiteSummary,
    /// Random batches whose geometric means fell outside `p_tilde <= p` and
    /// were redrawn.
    pub out_of_region: usize,
    pub max_identity_error: f64,
}

/// Random batches of size `1..=max_batch` with per-example pairs in either
/// direction, kept when the geometric means satisfy `p_tilde <= p`.
pub fn theorem2_suite(batches: usize, max_batch: usize, seed: u64) -> Result<BatchSuiteSummary> {
    if max_batch == 0 {
        return Err(Error::config("max_batch must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = SuiteSummary::new();
    let mut out_of_region = 0;
    let mut max_identity_error: f64 = 0.0;
    while summary.samples < batches {
        let m = rng.random_range(1..=max_batch);
        let pairs: Vec<ProbePair> = (0..m)
            .map(|_| {
                let p = rng.random_range(SAMPLE_LO..=SAMPLE_HI);
                let p_tilde = rng.random_range(SAMPLE_LO..=SAMPLE_HI);
                ProbePair::new(p, p_tilde)
            })
            .collect::<Result<_>>()?;
        let check = check_theorem2(&pairs)?;
        if check.p_tilde_mean > check.p_mean {
            out_of_region += 1;
            continue;
        }
        max_identity_error = max_identity_error.max(check.identity_error);
        summary.record(check.outcome, [check.p_mean, check.p_tilde_mean, 0.0]);
    }
    Ok(BatchSuiteSummary {
        summary,
        out_of_region,
        max_identity_error,
    })
}

/// One probed optimizer step: true-label probabilities before and after the
/// ascent (geometric means over the batch when it holds more than one example).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: usize,
    pub epoch: usize,
    pub p: f64,
    pub p_tilde: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub rho: f64,
    pub steps: usize,
    /// Index range `[first_step, last_step]` of the probes considered.
    pub first_step: usize,
    pub last_step: usize,
    /// Fraction with `p_tilde <= p`.
    pub frac_decreased: f64,
    /// Fraction with `ln(p / p_tilde) >= ρ/2` (up to 1e-12).
    pub frac_bound: f64,
    /// 5/25/50/75/95% quantiles of `ln(p / p_tilde) - ρ/2`.
    pub margin_quantiles: [f64; 5],
}

/// Summarizes how often the perturbation lowered the true-label probability.
/// Diagnostic only: the curvature hypothesis behind the exponential bound is
/// not checked.
pub fn lemma1_monitor(probes: &[ProbeRecord], rho: f64) -> Result<Lemma1Report> {
    if probes.is_empty() {
        return Err(Error::config("lemma monitor needs at least one probe"));
    }
    let half = rho / 2.0;
    let mut margins: Vec<f64> = Vec::with_capacity(probes.len());
    let mut decreased = 0usize;
    let mut bound = 0usize;
    for pr in probes {
        let pair = ProbePair::new(pr.p, pr.p_tilde)?;
        if pair.p_tilde <= pair.p {
            decreased += 1;
        }
        let log_ratio = (pair.p / pair.p_tilde).ln();
        if log_ratio >= half - 1e-12 {
            bound += 1;
        }
        margins.push(log_ratio - half);
    }
    margins.sort_by(f64::total_cmp);
    let q = |f: f64| {
        let idx = ((margins.len() - 1) as f64 * f).round() as usize;
        margins[idx]
    };
    let n = probes.len() as f64;
    Ok(Lemma1Report {
        rho,
        steps: probes.len(),
        first_step: probes.iter().map(|p| p.step).min().unwrap(),
        last_step: probes.iter().map(|p| p.step).max().unwrap(),
        frac_decreased: decreased as f64 / n,
        frac_bound: bound as f64 / n,
        margin_quantiles: [q(0.05), q(0.25), q(0.5), q(0.75), q(0.95)],
    })
}

/// Monitor restricted to the last `tail_fraction` of steps (by step index).
pub fn lemma1_monitor_tail(probes: &[ProbeRecord], rho: f64, tail_fraction: f64) -> Result<Lemma1Report> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::config(format!("tail fraction must be in (0, 1], got {tail_fraction}")));
    }
    let mut sorted = probes.to_vec();
    sorted.sort_by_key(|p| p.step);
    let keep = ((sorted.len() as f64 * tail_fraction).ceil() as usize).max(1);
    let start = sorted.len().saturating_sub(keep);
    lemma1_monitor(&sorted[start..], rho)
}

/// One report per epoch, in epoch order.
pub fn lemma1_by_epoch(probes: &[ProbeRecord], rho: f64) -> Result<Vec<(usize, Lemma1Report)>> {
    let mut epochs: Vec<usize> = probes.iter().map(|p| p.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    epochs
        .into_iter()
        .map(|e| {
            let subset: Vec<ProbeRecord> = probes.iter().filter(|p| p.epoch == e).copied().collect();
            lemma1_monitor(&subset, rho).map(|r| (e, r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pair(p: f64, pt: f64) -> ProbePair {
        ProbePair::new(p, pt).unwrap()
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_of(0.7, 0.7).unwrap(), 1.0);
        assert_abs_diff_eq!(lambda_of(0.9, 0.8).unwrap(), 2.0, epsilon = 1e-12);
        assert!(lambda_of(0.9, 0.6).unwrap() >= 1.0);
        assert!(lambda_of(1.0, 0.5).is_err());
    }

    #[test]
    fn lower_bound_examples() {
        for i in 1..20 {
            let p = i as f64 / 20.0;
            assert_eq!(lambda_lower_bound(0.0, p).unwrap(), 1.0);
        }
        let vals: Vec<f64> = (0..10)
            .map(|i| lambda_lower_bound(i as f64 * 0.05, 0.6).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));

        let pt: f64 = 0.8;
        let edge = 2.0 * (1.0 / pt).ln();
        assert!(lambda_lower_bound(edge - 1e-9, pt).unwrap() > 1e6);
        assert!(lambda_lower_bound(edge + 1e-9, pt).is_err());
        assert!(lambda_lower_bound(-0.1, pt).is_err());
    }

    #[test]
    fn theorem1_examples() {
        let r = check_theorem1(&pair(0.9, 0.6)).unwrap();
        assert!(r.holds && r.slack >= 0.0);
        let r = check_theorem1(&pair(0.37, 0.37)).unwrap();
        assert_eq!(r.slack, 0.0);
        let r = check_theorem1(&pair(0.5, 0.9)).unwrap();
        assert!(!r.holds);
    }

    #[test]
    fn theorem3_examples() {
        for (p, pt) in [(0.9, 0.6), (0.99, 0.51), (0.75, 0.75)] {
            let q = pair(p, pt);
            assert_eq!(check_theorem3(&q, 0.0).unwrap(), check_theorem1(&q).unwrap());
        }
        let r = check_theorem3(&pair(0.51, 0.51), 2.0).unwrap();
        assert!(r.slack >= 0.0 && r.holds);
        assert!(check_theorem3(&pair(0.9, 0.4), 1.0).is_err());
        assert!(check_theorem3(&pair(0.6, 0.7), 1.0).is_err());
        assert!(check_theorem3(&pair(0.9, 0.7), 2.5).is_err());
    }

    #[test]
    fn theorem2_examples() {
        let q = pair(0.83, 0.61);
        let b = check_theorem2(&[q]).unwrap();
        assert_eq!(b.outcome, check_theorem1(&q).unwrap());

        let same = check_theorem2(&[q, q, q]).unwrap();
        assert_eq!(same.p_mean, 0.83);
        assert_eq!(same.p_tilde_mean, 0.61);

        // example 2 moves up, the others down; geometric means still ordered
        let batch = [pair(0.9, 0.5), pair(0.4, 0.6), pair(0.8, 0.7)];
        let b = check_theorem2(&batch).unwrap();
        let p_bar = ((0.9f64.ln() + 0.4f64.ln() + 0.8f64.ln()) / 3.0).exp();
        let pt_bar = ((0.5f64.ln() + 0.6f64.ln() + 0.7f64.ln()) / 3.0).exp();
        assert_abs_diff_eq!(b.p_mean, p_bar, epsilon = 1e-15);
        assert_abs_diff_eq!(b.p_tilde_mean, pt_bar, epsilon = 1e-15);
        assert!(pt_bar <= p_bar);
        assert!(b.outcome.holds);
        assert!(b.identity_error < 1e-12);
    }

    #[test]
    fn small_suites_are_clean() {
        let s = theorem1_suite(2000, 1).unwrap();
        assert_eq!((s.samples, s.violations), (2000, 0));
        let s = theorem3_suite(2000, 2).unwrap();
        assert_eq!((s.samples, s.violations), (2000, 0));
        let s = theorem2_suite(500, 16, 3).unwrap();
        assert_eq!(s.summary.violations, 0);
    }

    #[test]
    fn landscape_properties() {
        let (rhos, pts) = default_lambda_grid();
        assert!(landscape_is_monotone(&rhos, &pts));
        let pts_all = lambda_landscape(&rhos, &pts);
        assert!(pts_all.iter().filter(|p| p.rho == 0.0).all(|p| p.lambda_lb == 1.0));
        assert_eq!(pts_all.iter().filter(|p| p.rho == 0.0).count(), pts.len());
        assert!(pts_all.iter().all(|p| p.lambda_lb >= 1.0 && p.lambda_lb.is_finite()));
        assert!(lambda_csv(&pts_all).starts_with("rho,p_tilde,lambda_lb\n"));
    }

    fn probe(step: usize, p: f64, pt: f64) -> ProbeRecord {
        ProbeRecord {
            step,
            epoch: step / 10,
            p,
            p_tilde: pt,
            grad_norm: 1.0,
        }
    }

    #[test]
    fn monitor_zero_radius_and_boundary() {
        let stream: Vec<_> = (0..20).map(|i| probe(i, 0.3 + 0.03 * i as f64, 0.3 + 0.03 * i as f64)).collect();
        let r = lemma1_monitor(&stream, 0.0).unwrap();
        assert_eq!(r.frac_decreased, 1.0);
        assert_eq!(r.frac_bound, 1.0);

        let rho = 0.2;
        let stream: Vec<_> = (0..20)
            .map(|i| {
                let p = 0.2 + 0.04 * i as f64;
                probe(i, p, (-rho / 2.0f64).exp() * p)
            })
            .collect();
        let r = lemma1_monitor(&stream, rho).unwrap();
        assert_eq!(r.frac_decreased, 1.0);
        assert_eq!(r.frac_bound, 1.0);
        assert!(r.margin_quantiles.iter().all(|m| m.abs() < 1e-12));

        assert!(lemma1_monitor(&[], 0.1).is_err());
    }

    #[test]
    fn monitor_tail_window() {
        let stream: Vec<_> = (0..40)
            .map(|i| if i < 30 { probe(i, 0.5, 0.6) } else { probe(i, 0.6, 0.5) })
            .collect();
        let r = lemma1_monitor_tail(&stream, 0.0, 0.25).unwrap();
        assert_eq!((r.steps, r.first_step, r.last_step), (10, 30, 39));
        assert_eq!(r.frac_decreased, 1.0);
        let per_epoch = lemma1_by_epoch(&stream, 0.0).unwrap();
        assert_eq!(per_epoch.len(), 4);
        assert_eq!(per_epoch[3].1.frac_decreased, 1.0);
        assert_eq!(per_epoch[0].1.frac_decreased, 0.0);
    }
}
