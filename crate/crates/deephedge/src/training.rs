//! Risk-penalty estimators and their gradients, the mini-batch policy
//! gradient training loop (full-rollout backpropagation through trading,
//! accounting and the leverage bound), evaluation metrics, Shapley-based
//! feature attribution, and the rolling historical backtest.

use crate::error::{Error, Result};
use crate::hedging::{
    self, HedgeConfig, HedgeResult, Normalizer, Observation, Penalty, StateSpace, Strategy,
};
use crate::jivr::{MarketState, PathSet};
use crate::neural::{
    adam_step, glorot_init, policy_forward, policy_forward_tape, Descriptor, FeaturePart, NodeId,
    OptimizerState, PolicyWeights, RecurrentState, Tape,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

// ---------------------------------------------------------------------------
// Penalty estimators
// ---------------------------------------------------------------------------

/// Empirical risk of a sample of terminal hedging errors.
///
/// CVaR uses the order-statistic estimator: with the sample sorted
/// ascending and k = ceil(alpha * N), VaR-hat is the k-th order statistic
/// and CVaR-hat adds the scaled mean excess above it.
pub fn penalty_estimate(xis: &[f64], kind: Penalty, alpha: f64) -> Result<f64> {
    if xis.is_empty() {
        return Err(Error::domain("penalty of an empty sample"));
    }
    let n = xis.len() as f64;
    match kind {
        Penalty::Mse => Ok(xis.iter().map(|x| x * x).sum::<f64>() / n),
        Penalty::Smse => Ok(xis.iter().filter(|&&x| x >= 0.0).map(|x| x * x).sum::<f64>() / n),
        Penalty::Cvar => {
            if !(0.0 < alpha && alpha < 1.0) {
                return Err(Error::domain(format!("CVaR level must be in (0,1), got {alpha}")));
            }
            let var = var_hat(xis, alpha);
            let excess: f64 = xis.iter().map(|&x| (x - var).max(0.0)).sum();
            Ok(var + excess / ((1.0 - alpha) * n))
        }
    }
}

/// Order-statistic VaR estimate at level `alpha`.
fn var_hat(xis: &[f64], alpha: f64) -> f64 {
    let mut sorted = xis.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = (alpha * sorted.len() as f64).ceil() as usize;
    sorted[k.clamp(1, sorted.len()) - 1]
}

/// Derivative of the batch penalty with respect to each sample element,
/// differentiating the estimator exactly as written (the VaR order-statistic
/// index is held fixed; kinks take one-sided subgradients).
pub fn penalty_gradient(xis: &[f64], kind: Penalty, alpha: f64) -> Result<Vec<f64>> {
    if xis.is_empty() {
        return Err(Error::domain("penalty gradient of an empty sample"));
    }
    let n = xis.len() as f64;
    match kind {
        Penalty::Mse => Ok(xis.iter().map(|x| 2.0 * x / n).collect()),
        Penalty::Smse => Ok(xis
            .iter()
            .map(|&x| if x >= 0.0 { 2.0 * x / n } else { 0.0 })
            .collect()),
        Penalty::Cvar => {
            let var = var_hat(xis, alpha);
            let scale = 1.0 / ((1.0 - alpha) * n);
            let n_above = xis.iter().filter(|&&x| x > var).count() as f64;
            let mut grads = vec![0.0; xis.len()];
            // the VaR element itself carries 1 - scale * #above; elements in
            // the tail carry the scaled excess derivative
            let mut var_assigned = false;
            for (g, &x) in grads.iter_mut().zip(xis.iter()) {
                if x > var {
                    *g = scale;
                } else if x == var && !var_assigned {
                    *g = 1.0 - scale * n_above;
                    var_assigned = true;
                }
            }
            Ok(grads)
        }
    }
}

// ---------------------------------------------------------------------------
// Feature specification
// ---------------------------------------------------------------------------

/// Which observables enter the policy's feature vector. Time-to-maturity and
/// the index level are always present; everything else is optional, which is
/// what the attribution study varies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub include_v: bool,
    pub include_delta: bool,
    pub include_beta: [bool; 5],
    pub include_h_r: bool,
    pub include_h: bool,
}

impl FeatureSpec {
    pub fn from_state_space(ss: StateSpace) -> Self {
        match ss {
            StateSpace::Full => FeatureSpec {
                include_v: true,
                include_delta: true,
                include_beta: [true; 5],
                include_h_r: true,
                include_h: true,
            },
            StateSpace::ReducedTc => FeatureSpec {
                include_v: false,
                include_delta: true,
                include_beta: [true; 5],
                include_h_r: true,
                include_h: false,
            },
            StateSpace::ReducedNoTc => FeatureSpec {
                include_v: false,
                include_delta: false,
                include_beta: [true; 5],
                include_h_r: true,
                include_h: false,
            },
        }
    }

    /// Subset of the six informational features (beta_1..beta_5, h_R) on top
    /// of the (tau, S) baseline.
    pub fn subset(mask: [bool; 6]) -> Self {
        FeatureSpec {
            include_v: false,
            include_delta: false,
            include_beta: [mask[0], mask[1], mask[2], mask[3], mask[4]],
            include_h_r: mask[5],
            include_h: false,
        }
    }

    pub fn dim(&self) -> usize {
        2 + usize::from(self.include_v)
            + usize::from(self.include_delta)
            + self.include_beta.iter().filter(|&&b| b).count()
            + usize::from(self.include_h_r)
            + if self.include_h { 5 } else { 0 }
    }

    /// Raw (un-normalized) feature vector. Order: V?, delta?, tau, S,
    /// beta_i..., h_R?, h....
    pub fn raw(&self, obs: &Observation) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        if self.include_v {
            x.push(obs.v);
        }
        if self.include_delta {
            x.push(obs.delta_prev);
        }
        x.push(obs.tau);
        x.push(obs.s);
        for i in 0..5 {
            if self.include_beta[i] {
                x.push(obs.beta.beta[i]);
            }
        }
        if self.include_h_r {
            x.push(obs.h_r);
        }
        if self.include_h {
            x.extend_from_slice(&obs.h);
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Differentiable rollout
// ---------------------------------------------------------------------------

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    // splitmix-style avalanche over the three components
    let mut x = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(c.wrapping_mul(0x94d0_49bb_1331_11eb));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Per-feature standardization as an affine map `a*x + b`. Both rollouts and
/// the wrapped strategy use this exact form so their arithmetic agrees
/// bitwise with the tape's feature assembly.
fn norm_affine(norm: &Normalizer, i: usize) -> (f64, f64) {
    let sd = norm.std(i);
    (1.0 / sd, -norm.mean[i] / sd)
}

fn normalize_in_place(norm: &Normalizer, x: &mut [f64]) {
    for (i, xi) in x.iter_mut().enumerate() {
        let (a, b) = norm_affine(norm, i);
        *xi = a * *xi + b;
    }
}

struct StepObs {
    s: f64,
    s_next: f64,
    tau: f64,
    beta: crate::surface::SurfaceCoeffs,
    h_r: f64,
    h: [f64; 5],
}

fn step_obs(paths: &PathSet, path: usize, t: usize) -> StepObs {
    let st = paths.state(path, t);
    let maturity = paths.horizon as f64 * paths.dt;
    StepObs {
        s: st.s,
        s_next: paths.state(path, t + 1).s,
        tau: maturity - t as f64 * paths.dt,
        beta: st.beta,
        h_r: st.h_r,
        h: st.h,
    }
}

fn initial_value(paths: &PathSet, path: usize, cfg: &HedgeConfig) -> Result<f64> {
    match cfg.v0_override {
        Some(v) => Ok(v),
        None => {
            let st = paths.state(path, 0);
            let maturity = paths.horizon as f64 * paths.dt;
            hedging::price_option(st.s, cfg.strike, maturity, &st.beta, paths.r, paths.q)
        }
    }
}

/// Rolls the policy through one path on the tape, differentiating through
/// the feature construction, the leverage bound, the trade and the
/// accounting. Returns the node holding the terminal hedging error.
#[allow(clippy::too_many_arguments)]
fn rollout_tape(
    tape: &mut Tape,
    w: &PolicyWeights,
    spec: &FeatureSpec,
    norm: &Normalizer,
    paths: &PathSet,
    path: usize,
    cfg: &HedgeConfig,
    mut dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<NodeId> {
    let v0 = initial_value(paths, path, cfg)?;
    let (r, q, dt) = (paths.r, paths.q, paths.dt);
    let mut v_node = tape.scalar_const(v0);
    let mut delta_node = tape.scalar_const(0.0);
    let mut rec: Vec<NodeId> = Vec::new();
    for t in 0..paths.horizon {
        let o = step_obs(paths, path, t);
        // assemble the normalized feature vector; V and delta enter as
        // affine transforms of their tape nodes
        let mut parts = Vec::with_capacity(spec.dim());
        let mut fi = 0usize;
        let push_const = |parts: &mut Vec<FeaturePart>, fi: &mut usize, raw: f64| {
            let (a, b) = norm_affine(norm, *fi);
            parts.push(FeaturePart::Const(a * raw + b));
            *fi += 1;
        };
        let push_node = |parts: &mut Vec<FeaturePart>, fi: &mut usize, id: NodeId| {
            let (a, b) = norm_affine(norm, *fi);
            parts.push(FeaturePart::Node { id, a, b });
            *fi += 1;
        };
        if spec.include_v {
            push_node(&mut parts, &mut fi, v_node);
        }
        if spec.include_delta {
            push_node(&mut parts, &mut fi, delta_node);
        }
        push_const(&mut parts, &mut fi, o.tau);
        push_const(&mut parts, &mut fi, o.s);
        for i in 0..5 {
            if spec.include_beta[i] {
                push_const(&mut parts, &mut fi, o.beta.beta[i]);
            }
        }
        if spec.include_h_r {
            push_const(&mut parts, &mut fi, o.h_r);
        }
        if spec.include_h {
            for i in 0..5 {
                push_const(&mut parts, &mut fi, o.h[i]);
            }
        }
        let x = tape.assemble(parts);

        let inf = tape.scalar_const(f64::INFINITY);
        let dropout_step = dropout.as_mut().map(|(rng, p)| (&mut **rng, *p));
        let (z_raw, _uncapped) = policy_forward_tape(tape, w, x, &mut rec, inf, dropout_step)?;

        // leverage bound: affine in (V, delta_prev); branch chosen from the
        // realized values exactly as the evaluation engine does
        let bound = if t == 0 {
            tape.scalar_const((v0 + cfg.b) / o.s)
        } else {
            let z_val = tape.scalar(z_raw);
            let d_prev = tape.scalar(delta_node);
            let v_val = tape.scalar(v_node);
            let kappa = cfg.kappa;
            let increase = z_val >= d_prev && {
                let cand = (v_val + cfg.b + kappa * o.s * d_prev) / (o.s * (1.0 + kappa));
                cand >= d_prev
            };
            let (av, ad, c) = if increase {
                let denom = o.s * (1.0 + kappa);
                (1.0 / denom, kappa * o.s * (1.0 / denom), cfg.b / denom)
            } else {
                let denom = o.s * (1.0 - kappa);
                if denom <= 0.0 {
                    return Err(Error::domain(format!(
                        "leverage bound undefined for kappa = {kappa} >= 1"
                    )));
                }
                (1.0 / denom, -kappa * o.s * (1.0 / denom), cfg.b / denom)
            };
            let from_v = tape.affine(v_node, av, c);
            let from_d = tape.affine(delta_node, ad, 0.0);
            tape.add(from_v, from_d)
        };
        let new_delta = tape.min(z_raw, bound);

        // self-financing trade and accrual
        let diff = tape.sub(new_delta, delta_node);
        let adiff = tape.abs(diff);
        let cost = tape.affine(adiff, cfg.kappa * o.s, 0.0);
        let stock_leg = tape.affine(new_delta, -o.s, 0.0);
        let after_trade = tape.add(v_node, stock_leg);
        let phi = tape.sub(after_trade, cost);
        let cash_grown = tape.affine(phi, (r * dt).exp(), 0.0);
        let stock_grown = tape.affine(new_delta, o.s_next * (q * dt).exp(), 0.0);
        v_node = tape.add(cash_grown, stock_grown);
        delta_node = new_delta;
    }
    let s_t = paths.state(path, paths.horizon).s;
    let payoff = (s_t - cfg.strike).max(0.0);
    Ok(tape.affine(v_node, -1.0, payoff))
}

/// Same rollout without a tape; returns the terminal hedging error. The
/// arithmetic mirrors `rollout_tape` operation for operation.
fn rollout_plain(
    w: &PolicyWeights,
    spec: &FeatureSpec,
    norm: &Normalizer,
    paths: &PathSet,
    path: usize,
    cfg: &HedgeConfig,
    mut dropout: Option<(&mut ChaCha8Rng, f64)>,
    mut observe: Option<&mut dyn FnMut(&[f64])>,
) -> Result<f64> {
    let v0 = initial_value(paths, path, cfg)?;
    let (r, q, dt) = (paths.r, paths.q, paths.dt);
    let mut v = v0;
    let mut delta = 0.0f64;
    let mut rec = RecurrentState::zeros(&w.desc);
    for t in 0..paths.horizon {
        let o = step_obs(paths, path, t);
        let obs = Observation {
            step: t,
            strike: cfg.strike,
            tau: o.tau,
            s: o.s,
            beta: o.beta,
            h_r: o.h_r,
            h: o.h,
            v,
            delta_prev: delta,
            r,
            q,
        };
        let raw = spec.raw(&obs);
        if let Some(f) = observe.as_mut() {
            f(&raw);
        }
        let mut x = raw;
        normalize_in_place(norm, &mut x);
        let dropout_step = dropout.as_mut().map(|(rng, p)| (&mut **rng, *p));
        let (z_raw, _) = policy_forward(w, &x, &mut rec, f64::INFINITY, dropout_step)?;
        let bound = leverage_bound_rollout(t, z_raw, v, o.s, delta, cfg)?;
        let new_delta = if z_raw <= bound { z_raw } else { bound };
        let cost = cfg.kappa * o.s * (new_delta - delta).abs();
        let phi = v + (-o.s) * new_delta - cost;
        v = phi * (r * dt).exp() + new_delta * (o.s_next * (q * dt).exp());
        delta = new_delta;
    }
    let s_t = paths.state(path, paths.horizon).s;
    let payoff = (s_t - cfg.strike).max(0.0);
    Ok((-1.0) * v + payoff)
}

/// The leverage bound exactly as the tape rollout computes it (affine form),
/// so plain and taped rollouts agree bitwise.
fn leverage_bound_rollout(
    t: usize,
    z: f64,
    v: f64,
    s: f64,
    delta_prev: f64,
    cfg: &HedgeConfig,
) -> Result<f64> {
    if t == 0 {
        // v here is v0
        return Ok((v + cfg.b) / s);
    }
    let kappa = cfg.kappa;
    let increase = z >= delta_prev && {
        let cand = (v + cfg.b + kappa * s * delta_prev) / (s * (1.0 + kappa));
        cand >= delta_prev
    };
    let (av, ad, c) = if increase {
        let denom = s * (1.0 + kappa);
        (1.0 / denom, kappa * s * (1.0 / denom), cfg.b / denom)
    } else {
        let denom = s * (1.0 - kappa);
        if denom <= 0.0 {
            return Err(Error::domain(format!("leverage bound undefined for kappa = {kappa} >= 1")));
        }
        (1.0 / denom, -kappa * s * (1.0 / denom), cfg.b / denom)
    };
    Ok((av * v + c) + ad * delta_prev)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Dropout rate on feedforward hidden layers; `None` disables dropout.
    pub dropout: Option<f64>,
    pub lstm_widths: Vec<usize>,
    pub ffnn_widths: Vec<usize>,
    pub recurrent: bool,
    /// Fraction of training paths held out for the validation curve.
    pub validation_fraction: f64,
}

impl TrainConfig {
    pub fn published_defaults() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 1000,
            learning_rate: 0.0005,
            seed: 0,
            dropout: Some(0.5),
            lstm_widths: vec![56, 56],
            ffnn_widths: vec![56, 56],
            recurrent: false,
            validation_fraction: 0.1,
        }
    }

    pub fn validate(&self, n_paths: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 || self.batch_size > n_paths {
            return Err(Error::config(format!(
                "batch size {} must be in 1..={} (the number of training paths)",
                self.batch_size, n_paths
            )));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("dropout rate must be in [0,1), got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation fraction must be in [0,1)"));
        }
        Ok(())
    }

    fn descriptor(&self, input_dim: usize) -> Descriptor {
        Descriptor {
            input_dim,
            lstm_widths: self.lstm_widths.clone(),
            ffnn_widths: self.ffnn_widths.clone(),
            recurrent: self.recurrent,
        }
    }
}

/// Trained policy with its frozen normalizer and loss curves.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights: PolicyWeights,
    pub normalizer: Normalizer,
    /// Mean batch penalty per epoch.
    pub train_curve: Vec<f64>,
    /// Validation penalty per epoch (empty when no validation split).
    pub val_curve: Vec<f64>,
}

/// Trains the policy by mini-batch risk-sensitive policy gradient:
/// full-rollout tapes per path, the batch penalty differentiated through its
/// per-path seeds, and ADAM updates.
pub fn train(
    cfg: &TrainConfig,
    hedge: &HedgeConfig,
    spec: &FeatureSpec,
    paths: &PathSet,
) -> Result<TrainOutput> {
    hedge.validate()?;
    cfg.validate(paths.n_paths)?;
    let n_val = (paths.n_paths as f64 * cfg.validation_fraction).floor() as usize;
    let n_train = paths.n_paths - n_val;
    if n_train < cfg.batch_size {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} paths left after the validation split",
            cfg.batch_size, n_train
        )));
    }
    let desc = cfg.descriptor(spec.dim());
    let mut weights = glorot_init(&desc, cfg.seed)?;
    let mut opt = OptimizerState::new(weights.data.len(), cfg.learning_rate);
    let mut norm = Normalizer::new(spec.dim());
    let mut grads = vec![0.0; weights.data.len()];
    let mut train_curve = Vec::with_capacity(cfg.epochs);
    let mut val_curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SHUFFLE_TAG, 0));

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_penalties = Vec::new();
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < cfg.batch_size {
                continue; // drop the ragged tail batch
            }
            // snapshot the normalizer for this batch; fold the batch's raw
            // features into the running statistics for the next one
            let snapshot = norm.clone();
            let mut xis = Vec::with_capacity(batch.len());
            for (slot, &path) in batch.iter().enumerate() {
                let mut dropout_rng = cfg.dropout.map(|_| {
                    ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, (epoch * 100_000 + batch_idx) as u64, slot as u64))
                });
                let dropout = match (&mut dropout_rng, cfg.dropout) {
                    (Some(rng), Some(p)) => Some((rng, p)),
                    _ => None,
                };
                let mut update = |raw: &[f64]| norm.update(raw);
                let xi = rollout_plain(
                    &weights,
                    spec,
                    &snapshot,
                    paths,
                    path,
                    hedge,
                    dropout,
                    Some(&mut update),
                )?;
                xis.push(xi);
            }
            let penalty = penalty_estimate(&xis, hedge.penalty, hedge.alpha)?;
            if !penalty.is_finite() {
                return Err(Error::state(format!(
                    "training diverged: non-finite penalty {penalty} in epoch {epoch}, batch {batch_idx} (seed {})",
                    cfg.seed
                )));
            }
            epoch_penalties.push(penalty);
            let seeds = penalty_gradient(&xis, hedge.penalty, hedge.alpha)?;
            grads.iter_mut().for_each(|g| *g = 0.0);
            for (slot, &path) in batch.iter().enumerate() {
                if seeds[slot] == 0.0 {
                    continue;
                }
                let mut dropout_rng = cfg.dropout.map(|_| {
                    ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, (epoch * 100_000 + batch_idx) as u64, slot as u64))
                });
                let dropout = match (&mut dropout_rng, cfg.dropout) {
                    (Some(rng), Some(p)) => Some((rng, p)),
                    _ => None,
                };
                let mut tape = Tape::new(&weights.data);
                let xi_node =
                    rollout_tape(&mut tape, &weights, spec, &snapshot, paths, path, hedge, dropout)?;
                tape.backward(xi_node, seeds[slot], &mut grads)?;
            }
            adam_step(&mut weights, &grads, &mut opt)?;
        }
        train_curve.push(epoch_penalties.iter().sum::<f64>() / epoch_penalties.len().max(1) as f64);
        if n_val > 0 {
            let frozen = {
                let mut f = norm.clone();
                f.freeze();
                f
            };
            let mut val_xis = Vec::with_capacity(n_val);
            for path in n_train..paths.n_paths {
                val_xis.push(rollout_plain(
                    &weights, spec, &frozen, paths, path, hedge, None, None,
                )?);
            }
            val_curve.push(penalty_estimate(&val_xis, hedge.penalty, hedge.alpha)?);
        }
    }
    norm.freeze();
    Ok(TrainOutput { weights, normalizer: norm, train_curve, val_curve })
}

/// Domain separator for the shuffle stream relative to dropout streams.
const SHUFFLE_TAG: u64 = 0x7368_7566_666c_6531;

// ---------------------------------------------------------------------------
// Policy as a hedging strategy
// ---------------------------------------------------------------------------

/// A trained policy wrapped for the evaluation engine. Emits the raw
/// (uncapped) network output; the engine applies the leverage bound.
pub struct PolicyStrategy {
    pub weights: PolicyWeights,
    pub spec: FeatureSpec,
    pub normalizer: Normalizer,
    rec: RecurrentState,
}

impl PolicyStrategy {
    pub fn new(weights: PolicyWeights, spec: FeatureSpec, normalizer: Normalizer) -> Result<Self> {
        if weights.desc.input_dim != spec.dim() {
            return Err(Error::config(format!(
                "network expects {} inputs but the feature set provides {}",
                weights.desc.input_dim,
                spec.dim()
            )));
        }
        let rec = RecurrentState::zeros(&weights.desc);
        Ok(PolicyStrategy { weights, spec, normalizer, rec })
    }
}

impl Strategy for PolicyStrategy {
    fn reset(&mut self) {
        self.rec = RecurrentState::zeros(&self.weights.desc);
    }

    fn delta(&mut self, obs: &Observation) -> Result<f64> {
        let mut x = self.spec.raw(obs);
        normalize_in_place(&self.normalizer, &mut x);
        let (z_raw, _) = policy_forward(&self.weights, &x, &mut self.rec, f64::INFINITY, None)?;
        Ok(z_raw)
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Aggregated hedging metrics over a path sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_paths: usize,
    /// Mean of -xi.
    pub avg_pnl: f64,
    pub cvar_95: f64,
    pub cvar_99: f64,
    /// CVaR at the configured level of the centered errors.
    pub cvar_deviation: f64,
    pub mse: f64,
    pub smse: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
}

/// Computes all metrics from per-path hedge results.
pub fn metrics(results: &[HedgeResult], alpha: f64) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::domain("metrics of an empty result set"));
    }
    let xis: Vec<f64> = results.iter().map(|r| r.xi).collect();
    let n = xis.len() as f64;
    let mean = xis.iter().sum::<f64>() / n;
    let centered: Vec<f64> = xis.iter().map(|x| x - mean).collect();
    let costs: Vec<f64> = results.iter().map(|r| r.cost).collect();
    let cost_mean = costs.iter().sum::<f64>() / n;
    let cost_var = costs.iter().map(|c| (c - cost_mean).powi(2)).sum::<f64>() / n;
    Ok(MetricsReport {
        n_paths: results.len(),
        avg_pnl: -mean,
        cvar_95: penalty_estimate(&xis, Penalty::Cvar, 0.95)?,
        cvar_99: penalty_estimate(&xis, Penalty::Cvar, 0.99)?,
        cvar_deviation: penalty_estimate(&centered, Penalty::Cvar, alpha)?,
        mse: penalty_estimate(&xis, Penalty::Mse, alpha)?,
        smse: penalty_estimate(&xis, Penalty::Smse, alpha)?,
        cost_mean,
        cost_std: cost_var.sqrt(),
    })
}

/// Runs a strategy over a path set and reports metrics (dropout is never
/// active here: strategies carry no dropout state).
pub fn evaluate(
    paths: &PathSet,
    strategy: &mut dyn Strategy,
    cfg: &HedgeConfig,
) -> Result<(MetricsReport, Vec<HedgeResult>)> {
    let results = hedging::run_hedge(paths, strategy, cfg, false)?;
    let report = metrics(&results, cfg.alpha)?;
    Ok((report, results))
}

/// Writes one metrics row per named strategy.
pub fn export_metrics_csv(rows: &[(String, MetricsReport)], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "strategy,n_paths,avg_pnl,cvar_95,cvar_99,cvar_deviation,mse,smse,cost_mean,cost_std"
    )?;
    for (name, m) in rows {
        writeln!(
            out,
            "{name},{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}",
            m.n_paths,
            m.avg_pnl,
            m.cvar_95,
            m.cvar_99,
            m.cvar_deviation,
            m.mse,
            m.smse,
            m.cost_mean,
            m.cost_std
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// SAGE feature attribution
// ---------------------------------------------------------------------------

pub const SAGE_FEATURES: [&str; 6] = ["beta1", "beta2", "beta3", "beta4", "beta5", "h_R"];

/// How to traverse the subset lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SageMode {
    /// All 64 subsets; contributions satisfy the efficiency identity
    /// exactly.
    Exact,
    /// Monte Carlo over feature permutations.
    Sampled { permutations: usize },
}

/// Shapley attribution of the informational features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SageReport {
    pub feature_names: Vec<String>,
    pub contributions: Vec<f64>,
    /// rho(baseline) - rho(all features).
    pub total_reduction: f64,
    /// Contributions normalized by the total reduction.
    pub relative: Vec<f64>,
    /// (bitmask over SAGE_FEATURES, risk) for every subset evaluated.
    pub subset_risk: Vec<(u8, f64)>,
}

impl SageReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "feature,contribution,relative")?;
        for i in 0..self.feature_names.len() {
            writeln!(
                out,
                "{},{:.10},{:.10}",
                self.feature_names[i], self.contributions[i], self.relative[i]
            )?;
        }
        Ok(())
    }
}

fn mask_to_bits(mask: u8) -> [bool; 6] {
    std::array::from_fn(|i| mask & (1 << i) != 0)
}

/// Trains and scores one subset policy; memoized by bitmask.
fn subset_risk(
    mask: u8,
    cache: &mut HashMap<u8, f64>,
    cfg: &TrainConfig,
    hedge: &HedgeConfig,
    train_paths: &PathSet,
    test_paths: &PathSet,
) -> Result<f64> {
    if let Some(&r) = cache.get(&mask) {
        return Ok(r);
    }
    let spec = FeatureSpec::subset(mask_to_bits(mask));
    let mut sub_cfg = cfg.clone();
    // independent seed per subset, derived from (master seed, bitmask)
    sub_cfg.seed = mix_seed(cfg.seed, mask as u64, 0xa9e);
    let out = train(&sub_cfg, hedge, &spec, train_paths)?;
    let mut xis = Vec::with_capacity(test_paths.n_paths);
    for path in 0..test_paths.n_paths {
        xis.push(rollout_plain(
            &out.weights,
            &spec,
            &out.normalizer,
            test_paths,
            path,
            hedge,
            None,
            None,
        )?);
    }
    let rho = penalty_estimate(&xis, hedge.penalty, hedge.alpha)?;
    cache.insert(mask, rho);
    Ok(rho)
}

/// Trains and scores the policy for one feature subset, exactly as the
/// Shapley traversal does (same derived seed). Exposed so the degenerate
/// single-feature attribution can be checked against the direct risk
/// difference.
pub fn sage_subset_risk(
    mask: u8,
    cfg: &TrainConfig,
    hedge: &HedgeConfig,
    train_paths: &PathSet,
    test_paths: &PathSet,
) -> Result<f64> {
    if mask >= 64 {
        return Err(Error::config(format!("subset mask {mask} out of range (6 features)")));
    }
    let mut cache = HashMap::new();
    subset_risk(mask, &mut cache, cfg, hedge, train_paths, test_paths)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Shapley feature attribution: one policy per feature subset on top of the
/// always-present (tau, S) baseline.
pub fn sage(
    mode: SageMode,
    cfg: &TrainConfig,
    hedge: &HedgeConfig,
    train_paths: &PathSet,
    test_paths: &PathSet,
) -> Result<SageReport> {
    let mut cache: HashMap<u8, f64> = HashMap::new();
    let risk = |mask: u8, cache: &mut HashMap<u8, f64>| {
        subset_risk(mask, cache, cfg, hedge, train_paths, test_paths)
    };
    let mut contributions = vec![0.0f64; 6];
    match mode {
        SageMode::Exact => {
            for j in 0..6u8 {
                for mask in 0..64u8 {
                    if mask & (1 << j) != 0 {
                        continue;
                    }
                    let size = mask.count_ones() as usize;
                    let weight = factorial(size) * factorial(5 - size) / factorial(6);
                    let without = risk(mask, &mut cache)?;
                    let with = risk(mask | (1 << j), &mut cache)?;
                    contributions[j as usize] += weight * (without - with);
                }
            }
        }
        SageMode::Sampled { permutations } => {
            if permutations == 0 {
                return Err(Error::config("sampled mode needs at least one permutation"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5a9e, 1));
            let mut order: Vec<u8> = (0..6).collect();
            for _ in 0..permutations {
                order.shuffle(&mut rng);
                let mut mask = 0u8;
                for &j in &order {
                    let without = risk(mask, &mut cache)?;
                    let with = risk(mask | (1 << j), &mut cache)?;
                    contributions[j as usize] += (without - with) / permutations as f64;
                    mask |= 1 << j;
                }
            }
        }
    }
    let rho_base = risk(0, &mut cache)?;
    let rho_full = risk(63, &mut cache)?;
    let total = rho_base - rho_full;
    let relative: Vec<f64> = contributions
        .iter()
        .map(|c| if total.abs() > 0.0 { c / total } else { 0.0 })
        .collect();
    let mut subset_risk: Vec<(u8, f64)> = cache.into_iter().collect();
    subset_risk.sort_by_key(|&(m, _)| m);
    Ok(SageReport {
        feature_names: SAGE_FEATURES.iter().map(|s| s.to_string()).collect(),
        contributions,
        total_reduction: total,
        relative,
        subset_risk,
    })
}

// ---------------------------------------------------------------------------
// Historical backtest
// ---------------------------------------------------------------------------

/// A dated series of historical joint states (with observed index levels).
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalSeries {
    pub dates: Vec<String>,
    pub states: Vec<MarketState>,
    pub r: f64,
    pub q: f64,
}

const HISTORY_COLUMNS: [&str; 14] = [
    "date", "s", "beta1", "beta2", "beta3", "beta4", "beta5", "beta2_lag", "h_R", "h1", "h2",
    "h3", "h4", "h5",
];

/// Days since the Unix epoch for a YYYY-MM-DD date (civil-calendar
/// arithmetic).
fn date_to_days(date: &str) -> Result<i64> {
    let parts: Vec<&str> = date.split('-').collect();
    let bad = || Error::format(format!("date '{date}' is not YYYY-MM-DD"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let y: i64 = parts[0].parse().map_err(|_| bad())?;
    let m: i64 = parts[1].parse().map_err(|_| bad())?;
    let d: i64 = parts[2].parse().map_err(|_| bad())?;
    if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return Err(bad());
    }
    let y_adj = if m <= 2 { y - 1 } else { y };
    let era = y_adj.div_euclid(400);
    let yoe = y_adj - era * 400;
    let mp = if m > 2 { m - 3 } else { m + 9 };
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    Ok(era * 146_097 + doe - 719_468)
}

/// YYYY-MM-DD for a day count since the Unix epoch (inverse of
/// `date_to_days`).
fn days_to_date(z: i64) -> String {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    format!("{y:04}-{m:02}-{d:02}")
}

/// `n` consecutive business dates (Monday-Friday) starting at or after
/// `start` (YYYY-MM-DD).
pub fn business_dates(start: &str, n: usize) -> Result<Vec<String>> {
    let mut days = date_to_days(start)?;
    // day 0 (1970-01-01) was a Thursday; weekday 0 = Sunday
    let weekday = |d: i64| (d + 4).rem_euclid(7);
    while weekday(days) == 0 || weekday(days) == 6 {
        days += 1;
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(days_to_date(days));
        loop {
            days += 1;
            if weekday(days) != 0 && weekday(days) != 6 {
                break;
            }
        }
    }
    Ok(out)
}

/// Synthetic dated state series: one simulated path labeled with
/// consecutive business days. A stand-in for proprietary market history in
/// backtest demonstrations.
pub fn synthetic_history(
    paths: &PathSet,
    path: usize,
    start_date: &str,
) -> Result<HistoricalSeries> {
    if path >= paths.n_paths {
        return Err(Error::config(format!(
            "path {path} out of range; the set has {} paths",
            paths.n_paths
        )));
    }
    let n = paths.horizon + 1;
    let states = (0..n).map(|t| paths.state(path, t)).collect();
    Ok(HistoricalSeries {
        dates: business_dates(start_date, n)?,
        states,
        r: paths.r,
        q: paths.q,
    })
}

impl HistoricalSeries {
    pub fn load_csv(path: &Path, r: f64, q: f64) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::config(format!("cannot open history {}: {e}", path.display())))?;
        let headers = reader.headers()?.clone();
        for (i, expected) in HISTORY_COLUMNS.iter().enumerate() {
            if headers.get(i) != Some(expected) {
                return Err(Error::format(format!(
                    "history file {}: column {} should be '{expected}', found {:?}",
                    path.display(),
                    i + 1,
                    headers.get(i)
                )));
            }
        }
        let mut dates = Vec::new();
        let mut states = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let record = record?;
            let row_no = idx + 1;
            let parse = |col: usize| -> Result<f64> {
                record
                    .get(col)
                    .ok_or_else(|| {
                        Error::format(format!("history row {row_no}: missing {}", HISTORY_COLUMNS[col]))
                    })?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| {
                        Error::format(format!(
                            "history row {row_no}: {} not a number: {e}",
                            HISTORY_COLUMNS[col]
                        ))
                    })
            };
            let state = MarketState {
                s: parse(1)?,
                beta: crate::surface::SurfaceCoeffs {
                    beta: [parse(2)?, parse(3)?, parse(4)?, parse(5)?, parse(6)?],
                },
                beta2_lag: parse(7)?,
                h_r: parse(8)?,
                h: [parse(9)?, parse(10)?, parse(11)?, parse(12)?, parse(13)?],
            };
            state
                .validate()
                .map_err(|e| Error::format(format!("history row {row_no}: {e}")))?;
            dates.push(record.get(0).unwrap_or("").to_string());
            states.push(state);
        }
        let series = HistoricalSeries { dates, states, r, q };
        series.check_gaps()?;
        Ok(series)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{}", HISTORY_COLUMNS.join(","))?;
        for (date, st) in self.dates.iter().zip(self.states.iter()) {
            write!(out, "{date}")?;
            let mut cols = vec![st.s];
            cols.extend_from_slice(&st.beta.beta);
            cols.push(st.beta2_lag);
            cols.push(st.h_r);
            cols.extend_from_slice(&st.h);
            for v in cols {
                write!(out, ",{v:.17e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Rows must be strictly increasing business dates with no long gaps:
    /// more than 5 calendar days between consecutive rows is treated as
    /// missing data.
    pub fn check_gaps(&self) -> Result<()> {
        let mut gaps = Vec::new();
        for w in 0..self.dates.len().saturating_sub(1) {
            let a = date_to_days(&self.dates[w])?;
            let b = date_to_days(&self.dates[w + 1])?;
            if b <= a {
                return Err(Error::format(format!(
                    "history dates not increasing at {} -> {}",
                    self.dates[w],
                    self.dates[w + 1]
                )));
            }
            if b - a > 5 {
                gaps.push(format!("{} -> {}", self.dates[w], self.dates[w + 1]));
            }
        }
        if !gaps.is_empty() {
            return Err(Error::format(format!("history has gaps: {}", gaps.join(", "))));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// One-path PathSet over rows [start, start+steps].
    fn episode(&self, start: usize, steps: usize) -> PathSet {
        let mut set = PathSet::with_capacity(
            1,
            steps,
            1.0 / 252.0,
            self.r,
            self.q,
            0,
            "historical".into(),
            false,
        );
        for t in 0..=steps {
            set.push_state(0, t, &self.states[start + t], None);
        }
        set
    }
}

/// Option tenor of each backtest episode, in business days.
pub const BACKTEST_OPTION_DAYS: usize = 63;
/// Spacing between option inceptions, in business days.
pub const BACKTEST_ROLL_DAYS: usize = 21;

/// Cumulative realized P&L (-xi per episode) for each strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestReport {
    pub strategy_names: Vec<String>,
    /// Inception date of each episode.
    pub dates: Vec<String>,
    /// One cumulative series per strategy, aligned with `dates`.
    pub cumulative: Vec<Vec<f64>>,
}

impl BacktestReport {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "date,{}", self.strategy_names.join(","))?;
        for (i, date) in self.dates.iter().enumerate() {
            let row: Vec<String> =
                self.cumulative.iter().map(|c| format!("{:.10}", c[i])).collect();
            writeln!(out, "{date},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Rolls a 63-business-day ATM option every 21 business days along the
/// history and accumulates each strategy's realized P&L.
pub fn backtest(
    history: &HistoricalSeries,
    strategies: &mut [(String, &mut dyn Strategy)],
    hedge_template: &HedgeConfig,
) -> Result<BacktestReport> {
    if history.len() < BACKTEST_OPTION_DAYS + 1 {
        return Err(Error::config(format!(
            "history has {} rows; at least {} are needed for one option lifetime",
            history.len(),
            BACKTEST_OPTION_DAYS + 1
        )));
    }
    history.check_gaps()?;
    let mut dates = Vec::new();
    let mut cumulative = vec![Vec::new(); strategies.len()];
    let mut totals = vec![0.0f64; strategies.len()];
    let mut start = 0usize;
    while start + BACKTEST_OPTION_DAYS < history.len() {
        let episode = history.episode(start, BACKTEST_OPTION_DAYS);
        let s0 = history.states[start].s;
        let mut cfg = hedge_template.clone();
        cfg.strike = s0; // at the money at inception
        cfg.v0_override = None;
        for (i, (_name, strategy)) in strategies.iter_mut().enumerate() {
            let res = hedging::run_hedge(&episode, *strategy, &cfg, false)?;
            totals[i] += -res[0].xi;
            cumulative[i].push(totals[i]);
        }
        dates.push(history.dates[start].clone());
        start += BACKTEST_ROLL_DAYS;
    }
    Ok(BacktestReport {
        strategy_names: strategies.iter().map(|(n, _)| n.clone()).collect(),
        dates,
        cumulative,
    })
}
