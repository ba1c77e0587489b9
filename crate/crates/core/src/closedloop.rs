//! Differentiable closed-loop rollout and the penalty-form control loss.
//!
//! For a scenario with horizon `N` the rollout records, on one tape,
//!
//! ```text
//! y[k]   = C g[k]
//! u[k]   = pi([y[k], y_min[k], y_max[k], d[k]])
//! g[k+1] = A g[k] + B u[k] + E d[k]          k = 0..N-1
//! ```
//!
//! and the loss is
//!
//! ```text
//! q_track    * mean_k |y[k] - r[k]|
//! + q_terminal * |y[N] - r[N-1]|
//! + q_du       * mean_k |u[k] - u[k-1]|
//! + q_con      * mean_k ( relu(y_min[k] - y[k]) + relu(y[k] - y_max[k])
//!                       + relu(|u[k] - u[k-1]| - du_max) )
//! ```
//!
//! with `r[k]` the band midpoint, `u[-1] := u[0]`, and vector terms summed
//! over components. Batch losses average scenarios; gradients are reduced in
//! ascending scenario order regardless of how many threads evaluated them.

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeRef, Shape, Tape};
use crate::error::{Error, Result, ShapeError};
use crate::plant::LinearSsm;
use crate::policy::{ParamNodes, Policy};
use crate::scenarios::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub q_track: f64,
    pub q_du: f64,
    pub q_con: f64,
    pub q_terminal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { q_track: 0.01, q_du: 0.1, q_con: 0.02, q_terminal: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("q_track", self.q_track), ("q_du", self.q_du), ("q_con", self.q_con), ("q_terminal", self.q_terminal)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("loss.{k}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub track: f64,
    pub terminal: f64,
    pub du: f64,
    pub con: f64,
}

impl LossTerms {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.q_track * self.track + w.q_terminal * self.terminal + w.q_du * self.du + w.q_con * self.con
    }

    fn add_scaled(&mut self, other: &LossTerms, s: f64) {
        self.track += s * other.track;
        self.terminal += s * other.terminal;
        self.du += s * other.du;
        self.con += s * other.con;
    }
}

/// Tape handles produced by [`rollout`]. `g` and `y` hold `N + 1` entries,
/// `u` holds `N`.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub g: Vec<NodeRef>,
    pub y: Vec<NodeRef>,
    pub u: Vec<NodeRef>,
}

impl RolloutResult {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }
}

#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: NodeRef,
    pub track: NodeRef,
    pub terminal: NodeRef,
    pub du: NodeRef,
    pub con: NodeRef,
}

impl LossNodes {
    pub fn terms(&self, tape: &Tape) -> LossTerms {
        LossTerms {
            track: tape.scalar(self.track),
            terminal: tape.scalar(self.terminal),
            du: tape.scalar(self.du),
            con: tape.scalar(self.con),
        }
    }
}

fn matrix_leaf(tape: &mut Tape, m: &crate::linalg::Matrix) -> NodeRef {
    tape.constant(m.as_slice().to_vec(), Shape::Matrix(m.rows(), m.cols())).expect("matrix data matches its shape")
}

/// Unrolls the closed loop for `n` steps on `tape`.
pub fn rollout<P: Policy + ?Sized>(
    tape: &mut Tape,
    model: &LinearSsm,
    policy: &P,
    params: &ParamNodes,
    scenario: &Scenario,
    n: usize,
) -> Result<RolloutResult> {
    if scenario.horizon() != n || scenario.y_min.len() != n || scenario.y_max.len() != n {
        return Err(ShapeError::new(
            "rollout",
            format!(
                "horizon {n} but scenario {} has {} bands and {} disturbances",
                scenario.id,
                scenario.y_min.len(),
                scenario.d.len()
            ),
        )
        .into());
    }
    if scenario.g0.len() != model.nx() {
        return Err(ShapeError::new("rollout", format!("g0 has length {}, plant nx = {}", scenario.g0.len(), model.nx())).into());
    }
    if policy.in_dim() != crate::policy::feature_dim(model.ny(), model.nd()) || policy.out_dim() != model.nu() {
        return Err(ShapeError::new(
            "rollout",
            format!("policy maps {} -> {}, plant needs {} -> {}", policy.in_dim(), policy.out_dim(),
                crate::policy::feature_dim(model.ny(), model.nd()), model.nu()),
        )
        .into());
    }
    let a = matrix_leaf(tape, model.a());
    let b = matrix_leaf(tape, model.b());
    let c = matrix_leaf(tape, model.c());
    let e = matrix_leaf(tape, model.e());

    let mut g = tape.constant_vector(&scenario.g0);
    let mut gs = Vec::with_capacity(n + 1);
    let mut ys = Vec::with_capacity(n + 1);
    let mut us = Vec::with_capacity(n);
    for k in 0..n {
        let dk = &scenario.d[k];
        if dk.len() != model.nd() || scenario.y_min[k].len() != model.ny() || scenario.y_max[k].len() != model.ny() {
            return Err(ShapeError::new("rollout", format!("scenario {} step {k} has wrong widths", scenario.id)).into());
        }
        let y = tape.matvec(c, g)?;
        let lo = tape.constant_vector(&scenario.y_min[k]);
        let hi = tape.constant_vector(&scenario.y_max[k]);
        let d = tape.constant_vector(dk);
        let features = tape.concat(&[y, lo, hi, d])?;
        let u = policy.forward_taped(tape, params, features)?;
        let ag = tape.matvec(a, g)?;
        let bu = tape.matvec(b, u)?;
        let ed = tape.matvec(e, d)?;
        let next = tape.add(ag, bu)?;
        let next = tape.add(next, ed)?;
        gs.push(g);
        ys.push(y);
        us.push(u);
        g = next;
    }
    let y_last = tape.matvec(c, g)?;
    gs.push(g);
    ys.push(y_last);
    Ok(RolloutResult { g: gs, y: ys, u: us })
}

/// Builds the weighted loss for a recorded rollout.
pub fn loss(
    tape: &mut Tape,
    result: &RolloutResult,
    scenario: &Scenario,
    weights: &LossWeights,
    du_max: f64,
) -> Result<LossNodes> {
    let n = result.horizon();
    if result.y.len() != n + 1 || scenario.horizon() != n {
        return Err(ShapeError::new(
            "loss",
            format!("rollout has {} outputs for {n} controls, scenario horizon {}", result.y.len(), scenario.horizon()),
        )
        .into());
    }
    let mut track_k = Vec::with_capacity(n);
    let mut du_k = Vec::with_capacity(n);
    let mut con_k = Vec::with_capacity(n);
    let mut terminal = tape.constant_scalar(0.0);
    for k in 0..n {
        let y = result.y[k];
        let r = tape.constant_vector(&scenario.reference(k));
        let err = tape.sub(y, r)?;
        let err = tape.abs(err);
        track_k.push(tape.sum(err));

        let prev = result.u[k.saturating_sub(1)];
        let du = tape.sub(result.u[k], prev)?;
        let du_abs = tape.abs(du);
        du_k.push(tape.sum(du_abs));

        let lo = tape.constant_vector(&scenario.y_min[k]);
        let hi = tape.constant_vector(&scenario.y_max[k]);
        let below = tape.sub(lo, y)?;
        let below = tape.relu(below);
        let above = tape.sub(y, hi)?;
        let above = tape.relu(above);
        let limit = tape.constant_vector(&vec![du_max; du_abs.shape().len()]);
        let rate = tape.sub(du_abs, limit)?;
        let rate = tape.relu(rate);
        let band = tape.add(below, above)?;
        let band = tape.sum(band);
        let rate = tape.sum(rate);
        con_k.push(tape.add(band, rate)?);
    }
    if n > 0 {
        let r = tape.constant_vector(&scenario.reference(n - 1));
        let err = tape.sub(result.y[n], r)?;
        let err = tape.abs(err);
        terminal = tape.sum(err);
    }
    let mean_of = |tape: &mut Tape, parts: &[NodeRef]| -> Result<NodeRef> {
        let v = tape.concat(parts)?;
        Ok(tape.mean(v))
    };
    let track = mean_of(tape, &track_k)?;
    let du = mean_of(tape, &du_k)?;
    let con = mean_of(tape, &con_k)?;

    let wt = tape.scale(track, weights.q_track);
    let wn = tape.scale(terminal, weights.q_terminal);
    let wd = tape.scale(du, weights.q_du);
    let wc = tape.scale(con, weights.q_con);
    let total = tape.add(wt, wn)?;
    let total = tape.add(total, wd)?;
    let total = tape.add(total, wc)?;
    Ok(LossNodes { total, track, terminal, du, con })
}

/// Loss of one scenario and, when requested, its gradient with respect to the
/// flat policy parameters.
#[derive(Debug, Clone)]
pub struct ScenarioLoss {
    pub loss: f64,
    pub terms: LossTerms,
    pub grad: Option<Vec<f64>>,
}

pub fn scenario_loss<P: Policy + ?Sized>(
    model: &LinearSsm,
    policy: &P,
    scenario: &Scenario,
    weights: &LossWeights,
    with_grad: bool,
) -> Result<ScenarioLoss> {
    let mut tape = Tape::new();
    let params = policy.register(&mut tape);
    let result = rollout(&mut tape, model, policy, &params, scenario, scenario.horizon())?;
    let nodes = loss(&mut tape, &result, scenario, weights, model.du_max())?;
    let grad = if with_grad {
        let grads = tape.backward(nodes.total)?;
        Some(params.flat_grad(&grads))
    } else {
        None
    };
    Ok(ScenarioLoss { loss: tape.scalar(nodes.total), terms: nodes.terms(&tape), grad })
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub terms: LossTerms,
    /// Mean gradient over the batch; empty when gradients were not requested.
    pub grad: Vec<f64>,
}

/// Mean loss (and gradient) over `scenarios`. With a thread pool the
/// per-scenario work is spread across threads; the reduction order is fixed,
/// so results are bit-identical to sequential evaluation.
pub fn batch_loss<P: Policy + ?Sized>(
    model: &LinearSsm,
    policy: &P,
    scenarios: &[&Scenario],
    weights: &LossWeights,
    with_grad: bool,
    pool: Option<&ThreadPool>,
) -> Result<BatchLoss> {
    if scenarios.is_empty() {
        return Err(Error::invalid("batch", "must contain at least one scenario"));
    }
    let eval = |s: &&Scenario| scenario_loss(model, policy, s, weights, with_grad);
    let parts: Vec<Result<ScenarioLoss>> = match pool {
        Some(pool) if pool.current_num_threads() > 1 => pool.install(|| scenarios.par_iter().map(eval).collect()),
        _ => scenarios.iter().map(eval).collect(),
    };
    let m = scenarios.len() as f64;
    let mut loss = 0.0;
    let mut terms = LossTerms::default();
    let mut grad = if with_grad { vec![0.0; policy.num_params()] } else { Vec::new() };
    for part in parts {
        let part = part?;
        loss += part.loss;
        terms.add_scaled(&part.terms, 1.0);
        if let Some(g) = part.grad {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    loss /= m;
    let terms = LossTerms { track: terms.track / m, terminal: terms.terminal / m, du: terms.du / m, con: terms.con / m };
    grad.iter_mut().for_each(|g| *g /= m);
    Ok(BatchLoss { loss, terms, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{MlpPolicy, MlpShape};

    fn spec_plant() -> LinearSsm {
        LinearSsm::scalar(0.95, -0.5, 1.0, 0.3, 0.0, 5.0, 1.0)
    }

    fn zero_policy() -> MlpPolicy {
        let mut p = MlpPolicy::init(0, MlpShape { in_dim: 4, hidden: 32, depth: 2, nu: 1 }, vec![0.0], vec![5.0]).unwrap();
        p.set_params(&vec![0.0; p.num_params()]).unwrap();
        p
    }

    fn flat_scenario(g0: f64, lo: f64, hi: f64, n: usize) -> Scenario {
        Scenario { id: 0, g0: vec![g0], y_min: vec![vec![lo]; n], y_max: vec![vec![hi]; n], d: vec![vec![0.0]; n] }
    }

    #[test]
    fn zero_horizon_is_empty_and_free() {
        let p = zero_policy();
        let s = flat_scenario(10.0, 12.0, 14.0, 0);
        let out = scenario_loss(&spec_plant(), &p, &s, &LossWeights::default(), true).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.terms, LossTerms::default());
        assert!(out.grad.unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_policy_hand_unrolled_states() {
        let p = zero_policy();
        let s = flat_scenario(10.0, 12.0, 14.0, 3);
        let mut tape = Tape::new();
        let params = p.register(&mut tape);
        let r = rollout(&mut tape, &spec_plant(), &p, &params, &s, 3).unwrap();
        let us: Vec<f64> = r.u.iter().map(|&u| tape.scalar(u)).collect();
        assert_eq!(us, vec![2.5; 3]);
        let gs: Vec<f64> = r.g.iter().take(3).map(|&g| tape.scalar(g)).collect();
        let expected = [10.0, 8.25, 6.5875];
        for (a, b) in gs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rollout_rejects_length_mismatch() {
        let p = zero_policy();
        let s = flat_scenario(10.0, 12.0, 14.0, 3);
        let mut tape = Tape::new();
        let params = p.register(&mut tape);
        assert!(rollout(&mut tape, &spec_plant(), &p, &params, &s, 4).is_err());
    }

    #[test]
    fn single_step_loss_by_hand() {
        // y0 = 15 above the band [12, 14]; the zero policy's u = 2.5 drives
        // y1 = 0.95 * 15 - 0.5 * 2.5 = 13 onto the reference, so the terminal
        // term vanishes.
        let p = zero_policy();
        let s = flat_scenario(15.0, 12.0, 14.0, 1);
        let out = scenario_loss(&spec_plant(), &p, &s, &LossWeights::default(), false).unwrap();
        assert!((out.terms.track - 2.0).abs() < 1e-12);
        assert!(out.terms.terminal.abs() < 1e-12);
        assert_eq!(out.terms.du, 0.0);
        assert!((out.terms.con - 1.0).abs() < 1e-12);
        assert!((out.loss - 0.04).abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn in_band_on_reference_costs_nothing() {
        // Constant u = 2.5 and a plant at equilibrium: g = A g + B u.
        let plant = LinearSsm::scalar(0.5, 2.6, 1.0, 0.3, 0.0, 5.0, 1.0);
        let p = zero_policy();
        let s = flat_scenario(13.0, 12.0, 14.0, 4);
        let out = scenario_loss(&plant, &p, &s, &LossWeights::default(), false).unwrap();
        assert!(out.loss.abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn batch_of_one_and_duplicates() {
        let p = MlpPolicy::init(3, MlpShape { in_dim: 4, hidden: 8, depth: 2, nu: 1 }, vec![0.0], vec![5.0]).unwrap();
        let s = Scenario {
            id: 0,
            g0: vec![16.0],
            y_min: vec![vec![12.0]; 5],
            y_max: vec![vec![14.0]; 5],
            d: vec![vec![0.1], vec![0.2], vec![0.4], vec![0.3], vec![0.0]],
        };
        let plant = LinearSsm::default_scalar();
        let w = LossWeights::default();
        let single = scenario_loss(&plant, &p, &s, &w, true).unwrap();
        let one = batch_loss(&plant, &p, &[&s], &w, true, None).unwrap();
        assert_eq!(one.loss, single.loss);
        assert_eq!(one.grad, single.grad.unwrap());
        let two = batch_loss(&plant, &p, &[&s, &s], &w, true, None).unwrap();
        assert_eq!(two.loss, one.loss);
        assert!(batch_loss(&plant, &p, &[], &w, true, None).is_err());
    }
}
