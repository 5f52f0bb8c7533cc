//! Self-financing portfolio accounting with proportional transaction costs,
//! option pricing off the surface, the dynamic leverage bound, and the hedge
//! engine that rolls a strategy over a path set.

use crate::benchmarks::{self, BenchmarkKind};
use crate::error::{Error, Result};
use crate::jivr::PathSet;
use crate::surface::{self, SurfaceCoeffs, T_MIN};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Penalty applied to the terminal hedging error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    Mse,
    Smse,
    Cvar,
}

/// Which observables feed the hedging policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpace {
    /// (V, delta, tau, S, beta_1..beta_5, h_R, h_1..h_5)
    Full,
    /// (delta, tau, S, beta_1..beta_5, h_R)
    ReducedTc,
    /// (tau, S, beta_1..beta_5, h_R)
    ReducedNoTc,
}

impl StateSpace {
    pub fn dim(self) -> usize {
        match self {
            StateSpace::Full => 15,
            StateSpace::ReducedTc => 9,
            StateSpace::ReducedNoTc => 8,
        }
    }

    /// Raw (un-normalized) feature vector for one observation.
    pub fn features(self, obs: &Observation) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        match self {
            StateSpace::Full => {
                x.push(obs.v);
                x.push(obs.delta_prev);
            }
            StateSpace::ReducedTc => x.push(obs.delta_prev),
            StateSpace::ReducedNoTc => {}
        }
        x.push(obs.tau);
        x.push(obs.s);
        x.extend_from_slice(&obs.beta.beta);
        x.push(obs.h_r);
        if self == StateSpace::Full {
            x.extend_from_slice(&obs.h);
        }
        x
    }
}

/// Hedging problem configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HedgeConfig {
    /// Strike of the hedged call.
    pub strike: f64,
    /// Proportional transaction cost rate.
    pub kappa: f64,
    /// Cash borrowing bound (currency).
    pub b: f64,
    pub penalty: Penalty,
    /// CVaR confidence level.
    pub alpha: f64,
    pub state_space: StateSpace,
    /// Overrides the surface price of the option as the initial portfolio
    /// value when set.
    pub v0_override: Option<f64>,
}

impl HedgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.strike > 0.0) {
            return Err(Error::config(format!("strike must be > 0, got {}", self.strike)));
        }
        if self.kappa < 0.0 {
            return Err(Error::config(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.b > 0.0) {
            return Err(Error::config(format!("borrowing bound must be > 0, got {}", self.b)));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if self.kappa > 0.0 && self.state_space == StateSpace::ReducedNoTc {
            return Err(Error::config(
                "state space 'reduced_no_tc' omits the position and cannot hedge with \
                 transaction costs; use 'full' or 'reduced_tc'",
            ));
        }
        Ok(())
    }
}

/// Cash, position and marked value of the hedging portfolio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortfolioState {
    /// Cash account.
    pub phi: f64,
    /// Shares held.
    pub delta_pos: f64,
    /// Portfolio value at the current valuation instant.
    pub v: f64,
}

/// What a strategy sees before choosing the next position.
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub step: usize,
    /// Strike of the option being hedged.
    pub strike: f64,
    /// Time to maturity in years.
    pub tau: f64,
    pub s: f64,
    pub beta: SurfaceCoeffs,
    pub h_r: f64,
    pub h: [f64; 5],
    /// Current portfolio value (before the trade).
    pub v: f64,
    /// Position carried into this step.
    pub delta_prev: f64,
    pub r: f64,
    pub q: f64,
}

/// A hedging policy: possibly stateful within a path (recurrent policies),
/// reset between paths.
pub trait Strategy {
    /// Clears any per-path recurrent state.
    fn reset(&mut self);
    /// Desired position for the coming period.
    fn delta(&mut self, obs: &Observation) -> Result<f64>;
}

/// Closed-form benchmark policies as strategies.
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkStrategy {
    pub kind: BenchmarkKind,
    /// Transaction cost rate, used by the Leland delta.
    pub kappa: f64,
}

impl Strategy for BenchmarkStrategy {
    fn reset(&mut self) {}

    fn delta(&mut self, obs: &Observation) -> Result<f64> {
        // the surface is undefined below T_MIN; clamp for the final steps
        let tau = obs.tau.max(T_MIN);
        benchmarks::benchmark_delta(
            self.kind,
            obs.s,
            obs.strike,
            tau,
            &obs.beta,
            obs.r,
            obs.q,
            self.kappa,
        )
    }
}

/// Outcome of hedging one path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HedgeResult {
    /// Terminal hedging error, losses positive.
    pub xi: f64,
    /// Sum of discounted transaction costs.
    pub cost: f64,
    /// Optional per-step record of (position, value, cash) after each trade.
    pub trajectory: Option<Vec<(f64, f64, f64)>>,
}

/// Black-Scholes price of a call at the surface volatility; `tau` below the
/// surface's minimum maturity is clamped to it.
pub fn price_option(s: f64, k: f64, tau: f64, beta: &SurfaceCoeffs, r: f64, q: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("time to maturity must be > 0, got {tau}")));
    }
    let tau = tau.max(T_MIN);
    let m = surface::moneyness(s, k, r, q, tau)?;
    let sigma = surface::iv(m, tau, beta)?;
    benchmarks::bs_price(s, k, tau, sigma, r, q)
}

/// Self-financing trade: moves the position to `new_delta` at price `s`,
/// paying proportional costs out of cash.
pub fn rebalance(port: &PortfolioState, s: f64, new_delta: f64, kappa: f64) -> PortfolioState {
    let cost = kappa * s * (new_delta - port.delta_pos).abs();
    PortfolioState {
        phi: port.v - new_delta * s - cost,
        delta_pos: new_delta,
        v: port.v,
    }
}

/// Accrues cash at the risk-free rate and the position at the dividend
/// yield, marking the portfolio at the next price.
pub fn accrue(port: &PortfolioState, s_next: f64, r: f64, q: f64, dt: f64) -> PortfolioState {
    PortfolioState {
        phi: port.phi,
        delta_pos: port.delta_pos,
        v: port.phi * (r * dt).exp() + port.delta_pos * (s_next * (q * dt).exp()),
    }
}

/// Largest admissible position: going beyond it would push cash below `-b`.
/// The branch depends on whether the candidate position `z` increases or
/// decreases the holding.
pub fn leverage_bound(
    step: usize,
    z: f64,
    v: f64,
    s: f64,
    delta_prev: f64,
    kappa: f64,
    b: f64,
) -> Result<f64> {
    if !(s > 0.0) || !(b > 0.0) {
        return Err(Error::domain(format!("leverage bound needs S > 0 and B > 0, got S={s}, B={b}")));
    }
    if step == 0 {
        return Ok((v + b) / s);
    }
    if z >= delta_prev {
        let bound = (v + b + kappa * s * delta_prev) / (s * (1.0 + kappa));
        // when even holding delta_prev breaches the limit the capped trade is
        // a decrease, so the decrease-branch formula applies
        if bound >= delta_prev {
            return Ok(bound);
        }
    }
    let denom = s * (1.0 - kappa);
    if denom <= 0.0 {
        return Err(Error::domain(format!("leverage bound undefined for kappa = {kappa} >= 1")));
    }
    Ok((v + b - kappa * s * delta_prev) / denom)
}

/// Rolls `strategy` over every path: prices the option off the initial
/// surface, trades at every step under the leverage bound, and records the
/// terminal hedging error and cost.
pub fn run_hedge(
    paths: &PathSet,
    strategy: &mut dyn Strategy,
    cfg: &HedgeConfig,
    keep_trajectory: bool,
) -> Result<Vec<HedgeResult>> {
    cfg.validate()?;
    let n = paths.horizon;
    let dt = paths.dt;
    let maturity = n as f64 * dt;
    if n == 0 {
        return Err(Error::config("path set has zero steps; nothing to hedge"));
    }
    let mut out = Vec::with_capacity(paths.n_paths);
    for path in 0..paths.n_paths {
        strategy.reset();
        let s0 = paths.state(path, 0);
        let v0 = match cfg.v0_override {
            Some(v) => v,
            None => price_option(s0.s, cfg.strike, maturity, &s0.beta, paths.r, paths.q)?,
        };
        let mut port = PortfolioState { phi: v0, delta_pos: 0.0, v: v0 };
        let mut cost = 0.0;
        let mut trajectory = keep_trajectory.then(Vec::new);
        for t in 0..n {
            let st = paths.state(path, t);
            let obs = Observation {
                step: t,
                strike: cfg.strike,
                tau: maturity - t as f64 * dt,
                s: st.s,
                beta: st.beta,
                h_r: st.h_r,
                h: st.h,
                v: port.v,
                delta_prev: port.delta_pos,
                r: paths.r,
                q: paths.q,
            };
            let z = strategy.delta(&obs).map_err(|e| Error::Strategy {
                path,
                step: t,
                message: e.to_string(),
            })?;
            if !z.is_finite() {
                return Err(Error::Strategy {
                    path,
                    step: t,
                    message: format!("strategy produced a non-finite position: {z}"),
                });
            }
            let bound = leverage_bound(t, z, port.v, st.s, port.delta_pos, cfg.kappa, cfg.b)?;
            let new_delta = z.min(bound);
            cost += (-paths.r * dt * t as f64).exp()
                * cfg.kappa
                * st.s
                * (new_delta - port.delta_pos).abs();
            port = rebalance(&port, st.s, new_delta, cfg.kappa);
            if let Some(traj) = trajectory.as_mut() {
                traj.push((port.delta_pos, port.v, port.phi));
            }
            let s_next = paths.state(path, t + 1).s;
            port = accrue(&port, s_next, paths.r, paths.q, dt);
        }
        let s_t = paths.state(path, n).s;
        let xi = (s_t - cfg.strike).max(0.0) - port.v;
        out.push(HedgeResult { xi, cost, trajectory });
    }
    Ok(out)
}

/// Writes hedge results as CSV: path, xi, cost (one row per path).
pub fn export_results_csv(results: &[HedgeResult], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "path,xi,cost")?;
    for (i, r) in results.iter().enumerate() {
        writeln!(out, "{i},{:.17e},{:.17e}", r.xi, r.cost)?;
    }
    Ok(())
}

/// Online feature standardization (Welford running moments), frozen for
/// evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    m2: Vec<f64>,
    count: u64,
    pub frozen: bool,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Normalizer { mean: vec![0.0; dim], m2: vec![0.0; dim], count: 0, frozen: false }
    }

    /// Folds one raw feature vector into the running moments (no-op when
    /// frozen).
    pub fn update(&mut self, x: &[f64]) {
        if self.frozen {
            return;
        }
        debug_assert_eq!(x.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    pub fn std(&self, i: usize) -> f64 {
        if self.count < 2 {
            return 1.0;
        }
        let var = self.m2[i] / (self.count - 1) as f64;
        if var > 1e-24 {
            var.sqrt()
        } else {
            1.0
        }
    }

    /// Standardizes in place.
    pub fn apply(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.mean.len());
        for i in 0..x.len() {
            x[i] = (x[i] - self.mean[i]) / self.std(i);
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}
