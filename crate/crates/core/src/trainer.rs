//! Mini-batch AdamW training of the policy with dev-loss early stopping.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::closedloop::{batch_loss, LossTerms, LossWeights};
use crate::error::{Error, Result, ShapeError};
use crate::io;
use crate::plant::LinearSsm;
use crate::policy::{MlpPolicy, Policy};
use crate::scenarios::{batches, Dataset, Scenario};

/// Dev losses must improve by more than this to count as progress.
pub const MIN_IMPROVEMENT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs excluded from early-stopping bookkeeping.
    pub warmup_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub adamw: AdamWParams,
    /// Ramp the learning rate linearly over the warmup epochs instead of
    /// holding it constant.
    pub lr_warmup: bool,
    pub max_grad_norm: Option<f64>,
    pub hidden: usize,
    pub depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            warmup_epochs: 50,
            lr: 0.001,
            batch_size: 64,
            patience: 5,
            adamw: AdamWParams::default(),
            lr_warmup: false,
            max_grad_norm: None,
            hidden: 32,
            depth: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::config(format!("train.{k}"), m));
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs", format!("must be <= epochs ({} > {})", self.warmup_epochs, self.epochs));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", format!("must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience", "must be >= 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden", "must be >= 1".into());
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) {
            return bad("adamw.beta1", format!("must lie in [0, 1), got {}", a.beta1));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            return bad("adamw.beta2", format!("must lie in [0, 1), got {}", a.beta2));
        }
        if !(a.eps > 0.0) {
            return bad("adamw.eps", format!("must be > 0, got {}", a.eps));
        }
        if !(a.weight_decay >= 0.0) {
            return bad("adamw.weight_decay", format!("must be >= 0, got {}", a.weight_decay));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return bad("max_grad_norm", format!("must be > 0, got {n}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * weight_decay * theta`.
///
/// A non-finite gradient aborts before anything is modified; the error
/// carries the offending index.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64, hp: &AdamWParams) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(ShapeError::new(
            "adamw_step",
            format!("params {}, grads {}, moments {}/{}", params.len(), grads.len(), state.m.len(), state.v.len()),
        )
        .into());
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at parameter {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let theta = params[i];
        params[i] = theta - lr * (m_hat / (v_hat.sqrt() + hp.eps)) - lr * hp.weight_decay * theta;
    }
    Ok(())
}

/// Human-readable name of the parameter block that contains flat index `idx`.
pub fn param_block_name(policy: &MlpPolicy, idx: usize) -> String {
    let mut offset = 0;
    for (i, l) in policy.layers().iter().enumerate() {
        let w = l.weight.as_slice().len();
        if idx < offset + w {
            return format!("layer {i} weight");
        }
        offset += w;
        if idx < offset + l.bias.len() {
            return format!("layer {i} bias");
        }
        offset += l.bias.len();
    }
    format!("parameter {idx}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EpochBudget,
    EarlyStopping,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::EpochBudget => "epoch budget",
            StopReason::EarlyStopping => "early stopping",
        }
    }
}

/// Patience-based early stopping that ignores the first `warmup` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    warmup: usize,
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopCheck {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(warmup: usize, patience: usize) -> Self {
        Self { warmup, patience, best: None, stale: 0 }
    }

    /// Records the dev loss of 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, dev_loss: f64) -> StopCheck {
        if epoch <= self.warmup {
            return StopCheck { improved: false, stop: false };
        }
        let improved = self.best.is_none_or(|(_, b)| dev_loss < b - MIN_IMPROVEMENT);
        if improved {
            self.best = Some((epoch, dev_loss));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopCheck { improved, stop: self.stale >= self.patience }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_terms: LossTerms,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_loss: Option<f64>,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// Line-oriented history; wall times are left out so reruns match byte
    /// for byte.
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch,train_loss,dev_loss,dev_track,dev_terminal,dev_du,dev_con\n");
        for e in &self.epochs {
            let t = &e.dev_terms;
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                e.epoch, e.train_loss, e.dev_loss, t.track, t.terminal, t.du, t.con
            );
        }
        let _ = writeln!(s, "# best_epoch={}", self.best_epoch.map_or("none".into(), |e| e.to_string()));
        let _ = writeln!(s, "# best_dev_loss={}", self.best_dev_loss.map_or("none".into(), |l| format!("{l:?}")));
        let _ = writeln!(s, "# stop_reason={}", self.stop_reason.as_str());
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_text().as_bytes())
    }
}

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Dev loss of `policy` over a whole dataset.
pub fn evaluate(
    model: &LinearSsm,
    policy: &MlpPolicy,
    data: &Dataset,
    weights: &LossWeights,
    pool: Option<&ThreadPool>,
) -> Result<(f64, LossTerms)> {
    let refs: Vec<&Scenario> = data.scenarios.iter().collect();
    let out = batch_loss(model, policy, &refs, weights, false, pool)?;
    Ok((out.loss, out.terms))
}

/// Trains `policy` and returns the checkpoint of the best post-warmup dev
/// epoch (or the final policy when no epoch got past warmup).
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &LinearSsm,
    policy: MlpPolicy,
    train_set: &Dataset,
    dev_set: &Dataset,
    config: &TrainConfig,
    weights: &LossWeights,
    seed: u64,
    pool: Option<&ThreadPool>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainHistory)> {
    config.validate()?;
    weights.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::invalid("dataset", "train and dev sets must be non-empty"));
    }
    let mut policy = policy;
    let mut params = policy.params();
    let mut state = OptimizerState::new(params.len());
    let mut stopper = EarlyStopping::new(config.warmup_epochs, config.patience);
    let mut history = Vec::new();
    let mut best_params: Option<Vec<f64>> = None;
    let mut stop_reason = StopReason::EpochBudget;
    let mut last_meta = CheckpointMeta { seed, epoch: None, dev_loss: None };

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = if config.lr_warmup && config.warmup_epochs > 0 {
            config.lr * (epoch as f64 / config.warmup_epochs as f64).min(1.0)
        } else {
            config.lr
        };
        let mut train_sum = 0.0;
        for (bi, batch) in batches(train_set.len(), config.batch_size, epoch_shuffle_seed(seed, epoch))?.iter().enumerate() {
            let refs: Vec<&Scenario> = batch.iter().map(|&i| &train_set.scenarios[i]).collect();
            let mut out = batch_loss(model, &policy, &refs, weights, true, pool)?;
            if !out.loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, batch {bi}")));
            }
            if let Some(max) = config.max_grad_norm {
                clip(&mut out.grad, max);
            }
            train_sum += out.loss * refs.len() as f64;
            adamw_step(&mut params, &out.grad, &mut state, lr, &config.adamw).map_err(|e| match e {
                Error::Numerical(_) => {
                    let idx = out.grad.iter().position(|g| !g.is_finite()).unwrap_or(0);
                    Error::Numerical(format!(
                        "non-finite gradient in {} at epoch {epoch}, batch {bi}",
                        param_block_name(&policy, idx)
                    ))
                }
                other => other,
            })?;
            if let Some(i) = params.iter().position(|p| !p.is_finite()) {
                return Err(Error::Numerical(format!(
                    "optimizer produced a non-finite value in {} at epoch {epoch}, batch {bi}",
                    param_block_name(&policy, i)
                )));
            }
            policy.set_params(&params)?;
        }
        let (dev_loss, dev_terms) = evaluate(model, &policy, dev_set, weights, pool)?;
        if !dev_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite dev loss at epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss: train_sum / train_set.len() as f64,
            dev_loss,
            dev_terms,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        last_meta = CheckpointMeta { seed, epoch: Some(epoch), dev_loss: Some(dev_loss) };
        let check = stopper.observe(epoch, dev_loss);
        if check.improved {
            best_params = Some(params.clone());
        }
        if check.stop {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
    }

    let (meta, chosen) = match (stopper.best(), best_params) {
        (Some((epoch, loss)), Some(p)) => (CheckpointMeta { seed, epoch: Some(epoch), dev_loss: Some(loss) }, p),
        _ => (last_meta, params),
    };
    policy.set_params(&chosen)?;
    let best = stopper.best();
    let history = TrainHistory {
        epochs: history,
        best_epoch: best.map(|b| b.0),
        best_dev_loss: best.map(|b| b.1),
        stop_reason,
    };
    Ok((Checkpoint::new(policy, meta), history))
}
