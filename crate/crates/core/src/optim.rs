//! SGD with momentum, SAM and CSAM steps, learning-rate schedules and the
//! training driver.
//!
//! A SAM-family step evaluates the raw cross-entropy gradient `g1` on the
//! mini-batch, moves to `θ + ρ g1 / ‖g1‖₂` (global norm over the flat
//! parameter vector), evaluates the descent-loss gradient `g2` there on the
//! same mini-batch, and hands `g2` to the SGD update applied at the original
//! `θ`. CSAM differs from SAM only in the descent loss. Momentum and weight
//! decay enter the descent update only.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossKind};
use crate::metrics::argmax;
use crate::mlp::{forward_on_tape, MlpSpec, ModelParams};
use crate::tensor::{Tape, Tensor};
use crate::theory::{geometric_mean, ProbeRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Sam,
    Csam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Sam => "sam",
            OptimizerKind::Csam => "csam",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Initial learning rate.
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Perturbation radius.
    #[serde(default)]
    pub rho: f64,
    /// CSAM damping exponent.
    #[serde(default)]
    pub gamma: f64,
    pub epochs: u32,
    pub batch_size: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Floor of the cosine schedule.
    #[serde(default)]
    pub lr_min: f64,
    /// Epoch at which training switches to `switch_to`.
    #[serde(default)]
    pub switch_epoch: Option<u32>,
    #[serde(default)]
    pub switch_to: Option<OptimizerKind>,
    /// Train SGD/SAM descent steps on focal loss instead of cross-entropy.
    #[serde(default)]
    pub focal_gamma: Option<f64>,
    /// Record per-step `(p, p_tilde)` probes on SAM-family steps.
    #[serde(default)]
    pub probe: bool,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerKind, lr: f64, epochs: u32, batch_size: u32) -> Self {
        TrainConfig {
            optimizer,
            lr,
            momentum: default_momentum(),
            weight_decay: 0.0,
            rho: 0.0,
            gamma: 0.0,
            epochs,
            batch_size,
            seed: 0,
            lr_schedule: LrSchedule::Cosine,
            lr_min: 0.0,
            switch_epoch: None,
            switch_to: None,
            focal_gamma: None,
            probe: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(0.0..=2.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must be in [0, 2], got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::config(format!("lr_min must be in [0, lr], got {}", self.lr_min)));
        }
        match (self.switch_epoch, self.switch_to) {
            (Some(e), Some(_)) if e >= self.epochs => {
                return Err(Error::config(format!(
                    "switch_epoch {e} must be < epochs {}",
                    self.epochs
                )))
            }
            (Some(_), None) | (None, Some(_)) => {
                return Err(Error::config("switch_epoch and switch_to must be set together"))
            }
            _ => {}
        }
        if let Some(g) = self.focal_gamma {
            LossKind::Focal { gamma: g }.validate()?;
        }
        Ok(())
    }

    /// Optimizer in effect during `epoch`.
    pub fn optimizer_at(&self, epoch: u32) -> OptimizerKind {
        match (self.switch_epoch, self.switch_to) {
            (Some(e), Some(to)) if epoch >= e => to,
            _ => self.optimizer,
        }
    }

    pub fn descent_loss(&self, kind: OptimizerKind) -> LossKind {
        match (kind, self.focal_gamma) {
            (OptimizerKind::Csam, _) => LossKind::CsamOuter { gamma: self.gamma },
            (_, Some(gamma)) => LossKind::Focal { gamma },
            (_, None) => LossKind::CrossEntropy,
        }
    }

    pub fn hyper(&self) -> SgdHyper {
        SgdHyper {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdHyper {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(num_params: usize) -> Self {
        SgdState {
            velocity: vec![0.0; num_params],
        }
    }
}

/// `v ← μ v + (g + wd θ)`, `θ ← θ − η v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut SgdState, lr: f64, hyper: SgdHyper) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::shape(format!(
            "sgd_step: {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::non_finite(format!("gradient entry {i} is {}", grads[i])));
    }
    for ((theta, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = hyper.momentum * *v + (g + hyper.weight_decay * *theta);
        *theta -= lr * *v;
    }
    Ok(())
}

/// `η_min + ½ (η₀ − η_min)(1 + cos(π t / T))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos())
}

/// Loss, gradient and true-label probabilities at a parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// `p_y` per example, when the objective has a notion of one.
    pub true_probs: Vec<f64>,
}

pub trait Objective {
    fn evaluate(&mut self, params: &[f64], loss: LossKind) -> Result<Evaluation>;
}

/// Mean loss of an MLP over one fixed mini-batch.
pub struct BatchObjective<'a> {
    pub spec: &'a MlpSpec,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Objective for BatchObjective<'_> {
    fn evaluate(&mut self, params: &[f64], loss: LossKind) -> Result<Evaluation> {
        let model = ModelParams::from_flat(self.spec, params.to_vec())?;
        let mut tape = Tape::new();
        let x = tape.leaf(self.features.clone());
        let vars = model.register(&mut tape)?;
        let logits = forward_on_tape(&mut tape, self.spec, &vars, x)?;
        let log_probs = tape.log_softmax(logits)?;
        let root = losses::loss_on_tape(&mut tape, loss, log_probs, &self.labels)?;
        let value = tape.value(root).data()[0];
        let lp = tape.value(log_probs);
        let k = lp.cols();
        let true_probs = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &y)| lp.data()[i * k + y].exp())
            .collect();
        let grads = tape.backward(root)?;
        Ok(Evaluation {
            loss: value,
            grad: vars.flat_grad(&grads),
            true_probs,
        })
    }
}

/// Diagnostics of one SAM-family step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamStepTrace {
    pub step: usize,
    pub grad_norm: f64,
    /// `‖θ̃ − θ‖₂`; equals ρ whenever `grad_norm > 0`.
    pub eps_norm: f64,
    /// Ascent skipped because the gradient vanished.
    pub skipped: bool,
    pub p: Vec<f64>,
    pub p_tilde: Vec<f64>,
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Loss at the original weights (cross-entropy for SAM-family steps).
    pub loss: f64,
    pub trace: Option<SamStepTrace>,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Plain (or focal) SGD step on one mini-batch.
pub fn sgd_objective_step<O: Objective>(
    params: &mut [f64],
    objective: &mut O,
    loss: LossKind,
    lr: f64,
    hyper: SgdHyper,
    state: &mut SgdState,
) -> Result<StepOutcome> {
    let eval = objective.evaluate(params, loss)?;
    if !eval.loss.is_finite() {
        return Err(Error::non_finite(format!("training loss {}", eval.loss)));
    }
    sgd_step(params, &eval.grad, state, lr, hyper)?;
    Ok(StepOutcome {
        loss: eval.loss,
        trace: None,
    })
}

/// One SAM (descent loss = cross-entropy) or CSAM (descent loss = CSAM outer
/// loss) step.
#[allow(clippy::too_many_arguments)]
pub fn sam_step<O: Objective>(
    params: &mut [f64],
    objective: &mut O,
    descent_loss: LossKind,
    rho: f64,
    lr: f64,
    hyper: SgdHyper,
    state: &mut SgdState,
    step: usize,
) -> Result<StepOutcome> {
    if !(rho >= 0.0) {
        return Err(Error::config(format!("rho must be >= 0, got {rho}")));
    }
    let ascent = objective.evaluate(params, LossKind::CrossEntropy)?;
    if !ascent.loss.is_finite() {
        return Err(Error::non_finite(format!("training loss {}", ascent.loss)));
    }
    if let Some(i) = ascent.grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::non_finite(format!("ascent gradient entry {i}")));
    }
    let grad_norm = l2_norm(&ascent.grad);
    let skipped = grad_norm == 0.0;
    let perturbed: Vec<f64> = if skipped {
        params.to_vec()
    } else {
        let scale = rho / grad_norm;
        params
            .iter()
            .zip(&ascent.grad)
            .map(|(t, g)| t + scale * g)
            .collect()
    };
    let eps_norm = l2_norm(
        &perturbed
            .iter()
            .zip(params.iter())
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    );
    let descent = objective.evaluate(&perturbed, descent_loss)?;
    sgd_step(params, &descent.grad, state, lr, hyper)?;
    Ok(StepOutcome {
        loss: ascent.loss,
        trace: Some(SamStepTrace {
            step,
            grad_norm,
            eps_norm,
            skipped,
            p: ascent.true_probs,
            p_tilde: descent.true_probs,
        }),
    })
}

/// Mini-batch order for an epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u32, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Per-epoch log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    Diverged { epoch: u32, step: usize, reason: String },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub probes: Vec<ProbeRecord>,
    pub traces: Vec<SamStepTrace>,
}

impl TrainingLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
            .collect()
    }

    /// Columns `step,p_y,p_tilde_y,grad_norm`.
    pub fn probes_csv(&self) -> String {
        let mut s = String::from("step,p_y,p_tilde_y,grad_norm\n");
        for p in &self.probes {
            s.push_str(&format!("{},{},{},{}\n", p.step, p.p, p.p_tilde, p.grad_norm));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainingLog,
    pub status: TrainStatus,
}

impl TrainOutcome {
    pub fn is_complete(&self) -> bool {
        self.status == TrainStatus::Completed
    }
}

/// Mean cross-entropy and accuracy of `params` on a dataset.
pub fn evaluate_loss_acc(params: &ModelParams, ds: &Dataset) -> Result<(f64, f64)> {
    let lp = params.forward(&ds.features)?.log_softmax()?;
    let ce = losses::cross_entropy(&lp, &ds.labels)?;
    let correct = lp
        .row_iter()
        .zip(&ds.labels)
        .filter(|(r, &y)| argmax(r) == y)
        .count();
    Ok((ce.mean, correct as f64 / ds.len() as f64))
}

/// Trains from the spec's seeded initialization.
///
/// A non-finite loss or gradient stops training; the outcome then carries
/// the parameters and log up to that point with a `Diverged` status.
pub fn train(spec: &MlpSpec, train_set: &Dataset, val_set: Option<&Dataset>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if train_set.dim() != spec.input_dim() {
        return Err(Error::shape(format!(
            "dataset has {} features, model expects {}",
            train_set.dim(),
            spec.input_dim()
        )));
    }
    if train_set.classes() > spec.num_classes() {
        return Err(Error::shape(format!(
            "dataset has {} classes, model outputs {}",
            train_set.classes(),
            spec.num_classes()
        )));
    }
    let mut params = ModelParams::init(spec)?;
    let mut state = SgdState::new(params.num_params());
    let mut log = TrainingLog::default();

    let n = train_set.len();
    let batch = config.batch_size as usize;
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = steps_per_epoch * config.epochs as usize;
    let hyper = config.hyper();
    let lr_at = |step: usize| match config.lr_schedule {
        LrSchedule::Constant => config.lr,
        LrSchedule::Cosine => cosine_lr(step, total_steps, config.lr, config.lr_min),
    };

    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let kind = config.optimizer_at(epoch);
        let descent_loss = config.descent_loss(kind);
        let order = epoch_order(config.seed, epoch, n);
        let epoch_lr = lr_at(step);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let mut objective = BatchObjective {
                spec,
                features: train_set.features.select_rows(chunk),
                labels: chunk.iter().map(|&i| train_set.labels[i]).collect(),
            };
            let lr = lr_at(step);
            let result = match kind {
                OptimizerKind::Sgd => {
                    sgd_objective_step(params.flat_mut(), &mut objective, descent_loss, lr, hyper, &mut state)
                }
                OptimizerKind::Sam | OptimizerKind::Csam => sam_step(
                    params.flat_mut(),
                    &mut objective,
                    descent_loss,
                    config.rho,
                    lr,
                    hyper,
                    &mut state,
                    step,
                ),
            };
            let outcome = match result {
                Ok(o) => o,
                Err(Error::NonFinite(reason)) => {
                    return Ok(TrainOutcome {
                        params,
                        log,
                        status: TrainStatus::Diverged { epoch, step, reason },
                    });
                }
                Err(e) => return Err(e),
            };
            loss_sum += outcome.loss * chunk.len() as f64;
            if let Some(trace) = outcome.trace {
                if config.probe {
                    log.probes.push(ProbeRecord {
                        step,
                        epoch: epoch as usize,
                        p: geometric_mean(&clamped(&trace.p))?,
                        p_tilde: geometric_mean(&clamped(&trace.p_tilde))?,
                        grad_norm: trace.grad_norm,
                    });
                    log.traces.push(trace);
                }
            }
            step += 1;
        }
        let (val_loss, val_acc) = match val_set {
            Some(v) => {
                let (l, a) = evaluate_loss_acc(&params, v)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let train_loss = loss_sum / n as f64;
        log.epochs.push(EpochRecord {
            epoch,
            lr: epoch_lr,
            train_loss,
            val_loss,
            val_acc,
        });
        if !params.flat().iter().all(|v| v.is_finite()) {
            return Ok(TrainOutcome {
                params,
                log,
                status: TrainStatus::Diverged {
                    epoch,
                    step,
                    reason: "parameters became non-finite".into(),
                },
            });
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        status: TrainStatus::Completed,
    })
}

fn clamped(ps: &[f64]) -> Vec<f64> {
    ps.iter().map(|p| p.max(crate::theory::PROB_MARGIN)).collect()
}

/// `members` independent runs; member `i` uses seed `seed + i` for both the
/// initialization and the batch order.
pub fn train_ensemble(
    spec: &MlpSpec,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    members: u32,
) -> Result<Vec<TrainOutcome>> {
    if members == 0 {
        return Err(Error::config("an ensemble needs at least one member"));
    }
    (0..members as u64)
        .into_par_iter()
        .map(|i| {
            let member_spec = spec.with_seed(spec.seed.wrapping_add(i));
            let member_config = TrainConfig {
                seed: config.seed.wrapping_add(i),
                ..config.clone()
            };
            train(&member_spec, train_set, val_set, &member_config)
        })
        .collect()
}
