//! JIVR state-transition equations and the path simulator.
//!
//! Innovation timing: the variance recursions at t+1 use the innovations of
//! step t, while the return and factor updates use the innovations of step
//! t+1. The simulator therefore carries the previous step's innovations in
//! its fold state; at t=0 the "previous" innovation vector is drawn as an
//! extra copula sample.

use super::params::JivrParams;
use super::pathset::PathSet;
use super::state::{MarketState, PoolRow, StatePool};
use crate::error::{Error, Result};
use crate::linalg::solve;
use crate::stochastics::{copula_sample, InnovationVector, Nig};
use crate::surface::{self, SurfaceCoeffs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Anchor maturity for the conditional-variance targets: the one-month ATM
/// point of the surface.
const ANCHOR_TAU: f64 = 1.0 / 12.0;

/// Equity risk premium for the coming step, given next-step return variance.
pub fn equity_premium(h_next: f64, lambda: f64, delta_t: f64, nig_r: &Nig) -> Result<f64> {
    if !(h_next > 0.0) {
        return Err(Error::domain(format!("equity premium needs h > 0, got {h_next}")));
    }
    let s = (h_next * delta_t).sqrt();
    Ok(nig_r.psi(-lambda * s)? - nig_r.psi((1.0 - lambda) * s)? + nig_r.psi(s)?)
}

/// News impact term of the NGARCH recursions.
fn news_impact(eps: f64, gamma: f64) -> f64 {
    eps * eps - 1.0 - 2.0 * gamma * eps
}

/// Advances the state by one step.
///
/// `prev_eps` are the innovations of the step being left (they drive the
/// variance updates); `eps` are the new innovations (they drive the return
/// and the factor updates). Returns the excess log-return and the new state.
pub fn step(
    state: &MarketState,
    prev_eps: &InnovationVector,
    eps: &InnovationVector,
    p: &JivrParams,
    nig_r: &Nig,
) -> Result<(f64, MarketState)> {
    let dt = p.delta_t;
    let anchor = surface::iv(0.0, ANCHOR_TAU, &state.beta)?;
    let y = (p.return_block.omega * anchor).powi(2);
    let u = (p.omega_1 * anchor).powi(2);

    let rb = &p.return_block;
    let h_r_next = y + rb.kappa * (state.h_r - y)
        + rb.a * state.h_r * news_impact(prev_eps.return_innovation(), rb.gamma);
    if !(h_r_next > 0.0) || !h_r_next.is_finite() {
        return Err(Error::state(format!("return variance became non-positive: {h_r_next}")));
    }

    let mut h_next = [0.0; 5];
    for i in 0..5 {
        let b = &p.beta_blocks[i];
        let target = if i == 0 {
            u
        } else {
            let s = b.sigma_annual.expect("beta_i>=2 blocks carry sigma");
            s * s
        };
        let h = target
            + b.kappa * (state.h[i] - target)
            + b.a * state.h[i] * news_impact(prev_eps.beta_innovation(i), b.gamma);
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::state(format!("beta_{} variance became non-positive: {h}", i + 1)));
        }
        h_next[i] = h;
    }

    let xi = equity_premium(h_r_next, p.lambda, dt, nig_r)?;
    let vol = (h_r_next * dt).sqrt();
    let r_next = xi - nig_r.psi(vol)? + vol * eps.return_innovation();

    let mut beta_next = [0.0; 5];
    for i in 0..5 {
        let b = &p.beta_blocks[i];
        let mut mean = b.alpha;
        for j in 0..5 {
            mean += b.theta[j] * state.beta.beta[j];
        }
        if i == 1 {
            mean += p.nu * state.beta2_lag;
        }
        beta_next[i] = mean + (h_next[i] * dt).sqrt() * eps.beta_innovation(i);
    }

    let next = MarketState {
        s: state.s * (r_next + (p.r - p.q) * dt).exp(),
        beta: SurfaceCoeffs { beta: beta_next },
        beta2_lag: state.beta.beta[1],
        h_r: h_r_next,
        h: h_next,
    };
    Ok((r_next, next))
}

/// RNG stream for one path: all paths derive from (seed, path index), so
/// results do not depend on scheduling.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path.wrapping_add(1));
    rng
}

/// Simulates `n_paths` JIVR trajectories of `horizon` daily steps, each
/// started from a pool row drawn uniformly (per-path seeded).
pub fn simulate(
    p: &JivrParams,
    pool: &StatePool,
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathSet> {
    if pool.is_empty() {
        return Err(Error::config("state pool is empty"));
    }
    let marginals = p.marginals()?;
    let nig_r = marginals.get(0).clone();
    let mut set = PathSet::with_capacity(n_paths, horizon, p.delta_t, p.r, p.q, seed, p.hash(), true);

    for path in 0..n_paths {
        let mut rng = path_rng(seed, path as u64);
        let row = &pool.rows[rng.gen_range(0..pool.len())];
        let mut state = row.to_state();
        state.validate()?;
        // presample innovation driving the first variance update
        let mut prev = copula_sample(&mut rng, &p.copula, &marginals);
        set.push_state(path, 0, &state, Some(&prev));
        for t in 1..=horizon {
            let eps = copula_sample(&mut rng, &p.copula, &marginals);
            let (_r, next) = step(&state, &prev, &eps, p, &nig_r).map_err(|e| {
                Error::state(format!("path {path}, step {t}: {e}"))
            })?;
            set.push_state(path, t, &next, Some(&eps));
            state = next;
            prev = eps;
        }
    }
    Ok(set)
}

/// Lognormal benchmark market: geometric Brownian motion with a flat
/// implied-volatility surface at `sigma` (first factor only). `mu` and
/// `sigma` are annualized; `dt` is the rebalancing interval in years.
/// Used for closed-form sanity experiments; the surface, variances and
/// factor lags are constant along every path.
#[allow(clippy::too_many_arguments)]
pub fn simulate_lognormal(
    s0: f64,
    mu: f64,
    sigma: f64,
    r: f64,
    q: f64,
    dt: f64,
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathSet> {
    if !(s0 > 0.0) || !(sigma > 0.0) || !(dt > 0.0) {
        return Err(Error::config(format!(
            "lognormal market needs s0, sigma, dt > 0; got s0={s0}, sigma={sigma}, dt={dt}"
        )));
    }
    let beta = SurfaceCoeffs { beta: [sigma, 0.0, 0.0, 0.0, 0.0] };
    let h = sigma * sigma;
    let mut set = PathSet::with_capacity(n_paths, horizon, dt, r, q, seed, "lognormal".into(), false);
    let drift = (mu - 0.5 * sigma * sigma) * dt;
    let vol = sigma * dt.sqrt();
    for path in 0..n_paths {
        let mut rng = path_rng(seed, path as u64);
        let mut s = s0;
        for t in 0..=horizon {
            if t > 0 {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                s *= (drift + vol * z).exp();
            }
            let state = MarketState { s, beta, beta2_lag: 0.0, h_r: h, h: [h; 5] };
            set.push_state(path, t, &state, None);
        }
    }
    Ok(set)
}

/// Long-run factor vector: the fixed point of the VAR mean equation,
/// including the beta_2 second-lag term.
pub fn var_fixed_point(p: &JivrParams) -> Result<[f64; 5]> {
    // (I - Theta - nu e2 e2') beta = alpha
    let mut a = [0.0f64; 25];
    let mut b = [0.0f64; 5];
    for i in 0..5 {
        b[i] = p.beta_blocks[i].alpha;
        for j in 0..5 {
            let theta = p.beta_blocks[i].theta[j];
            a[i * 5 + j] = if i == j { 1.0 - theta } else { -theta };
        }
    }
    a[1 * 5 + 1] -= p.nu;
    let x = solve(&a, &b, 5)?;
    let beta = [x[0], x[1], x[2], x[3], x[4]];
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("VAR fixed point is not finite"));
    }
    Ok(beta)
}

/// Builds a synthetic state pool by running one long JIVR path from the
/// unconditional starting point and subsampling states after burn-in.
pub fn make_synthetic_pool(
    p: &JivrParams,
    burn_in: usize,
    n_rows: usize,
    seed: u64,
) -> Result<StatePool> {
    if burn_in < 252 {
        return Err(Error::config(format!("burn_in must be >= 252 days, got {burn_in}")));
    }
    let beta_star = var_fixed_point(p)?;
    let coeffs = SurfaceCoeffs { beta: beta_star };
    let anchor = surface::iv(0.0, ANCHOR_TAU, &coeffs)?;
    let mut state = MarketState {
        s: 100.0,
        beta: beta_star.into_coeffs(),
        beta2_lag: beta_star[1],
        h_r: (p.return_block.omega * anchor).powi(2),
        h: [
            (p.omega_1 * anchor).powi(2),
            p.beta_blocks[1].sigma_annual.unwrap().powi(2),
            p.beta_blocks[2].sigma_annual.unwrap().powi(2),
            p.beta_blocks[3].sigma_annual.unwrap().powi(2),
            p.beta_blocks[4].sigma_annual.unwrap().powi(2),
        ],
    };
    state.validate()?;

    let marginals = p.marginals()?;
    let nig_r = marginals.get(0).clone();
    let mut rng = path_rng(seed, 0);
    let mut prev = copula_sample(&mut rng, &p.copula, &marginals);

    const STRIDE: usize = 21;
    let total = burn_in + n_rows * STRIDE;
    let mut rows = Vec::with_capacity(n_rows);
    for t in 1..=total {
        let eps = copula_sample(&mut rng, &p.copula, &marginals);
        let (_r, next) = step(&state, &prev, &eps, p, &nig_r)?;
        state = next;
        prev = eps;
        if t > burn_in && (t - burn_in) % STRIDE == 0 {
            rows.push(PoolRow {
                date: format!("synthetic-{:06}", t),
                beta: state.beta.beta,
                beta2_lag: state.beta2_lag,
                h_r: state.h_r,
                h: state.h,
                cluster: None,
            });
        }
    }
    StatePool::new(rows)
}

trait IntoCoeffs {
    fn into_coeffs(self) -> SurfaceCoeffs;
}

impl IntoCoeffs for [f64; 5] {
    fn into_coeffs(self) -> SurfaceCoeffs {
        SurfaceCoeffs { beta: self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn published() -> JivrParams {
        JivrParams::published()
    }

    fn nig_r(p: &JivrParams) -> Nig {
        Nig::new(p.nig_params()[0]).unwrap()
    }

    fn sample_state() -> MarketState {
        MarketState {
            s: 100.0,
            beta: SurfaceCoeffs { beta: [0.2, -0.04, 0.25, -0.07, -0.03] },
            beta2_lag: -0.04,
            h_r: 0.04,
            h: [0.0025, 0.14, 0.0027, 0.0024, 0.0027],
        }
    }

    #[test]
    fn premium_zero_at_lambda_zero() {
        let p = published();
        let nig = nig_r(&p);
        let xi = equity_premium(0.04, 0.0, p.delta_t, &nig).unwrap();
        assert_relative_eq!(xi, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn premium_at_lambda_one() {
        let p = published();
        let nig = nig_r(&p);
        let s = (0.04 * p.delta_t).sqrt();
        let xi = equity_premium(0.04, 1.0, p.delta_t, &nig).unwrap();
        let expected = nig.psi(-s).unwrap() + nig.psi(s).unwrap();
        assert_relative_eq!(xi, expected, epsilon = 1e-15);
    }

    #[test]
    fn premium_two_route_agreement() {
        // Direct psi evaluation vs the quadratic leading term of the series
        // expansion: xi = lambda * h * dt * (1 + O(sqrt(h dt))).
        let p = published();
        let nig = nig_r(&p);
        let h = 0.04;
        let xi = equity_premium(h, p.lambda, p.delta_t, &nig).unwrap();
        let s = (h * p.delta_t).sqrt();
        let direct = nig.psi(-p.lambda * s).unwrap() - nig.psi((1.0 - p.lambda) * s).unwrap()
            + nig.psi(s).unwrap();
        assert_relative_eq!(xi, direct, epsilon = 1e-10);
        let leading = p.lambda * h * p.delta_t;
        assert!((xi - leading).abs() / leading < 0.1, "xi={xi}, leading={leading}");
    }

    #[test]
    fn variance_update_without_arch_term() {
        let mut p = published();
        p.return_block.a = 0.0;
        let nig = nig_r(&p);
        let state = sample_state();
        let anchor = surface::iv(0.0, ANCHOR_TAU, &state.beta).unwrap();
        let y = (p.return_block.omega * anchor).powi(2);
        let zero = InnovationVector::zero();
        // eps = 0 has news_impact = -1, so use a = 0 to isolate mean reversion
        let (_r, next) = step(&state, &zero, &zero, &p, &nig).unwrap();
        let expected = y + p.return_block.kappa * (state.h_r - y);
        assert_relative_eq!(next.h_r, expected, epsilon = 1e-14);
    }

    #[test]
    fn variance_update_at_news_impact_root() {
        // eps = gamma + sqrt(gamma^2 + 1) is a root of eps^2 - 1 - 2 gamma eps.
        let p = published();
        let nig = nig_r(&p);
        let state = sample_state();
        let g = p.return_block.gamma;
        let root = g + (g * g + 1.0).sqrt();
        let mut prev = InnovationVector::zero();
        prev.eps[0] = root;
        let anchor = surface::iv(0.0, ANCHOR_TAU, &state.beta).unwrap();
        let y = (p.return_block.omega * anchor).powi(2);
        let (_r, next) = step(&state, &prev, &InnovationVector::zero(), &p, &nig).unwrap();
        let expected = y + p.return_block.kappa * (state.h_r - y);
        assert_relative_eq!(next.h_r, expected, epsilon = 1e-12);
    }

    #[test]
    fn variance_mean_reverts_in_expectation() {
        // E[eps^2 - 1 - 2 gamma eps] = 0 for standardized eps, so the
        // conditional mean of h_{t+1,R} is the mean-reversion term alone.
        let p = published();
        let marginals = p.marginals().unwrap();
        let nig = nig_r(&p);
        let state = sample_state();
        let anchor = surface::iv(0.0, ANCHOR_TAU, &state.beta).unwrap();
        let y = (p.return_block.omega * anchor).powi(2);
        let expected = y + p.return_block.kappa * (state.h_r - y);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let prev = copula_sample(&mut rng, &p.copula, &marginals);
            let (_r, next) = step(&state, &prev, &InnovationVector::zero(), &p, &nig).unwrap();
            sum += next.h_r;
            sum2 += next.h_r * next.h_r;
        }
        let mean = sum / n as f64;
        let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * se,
            "E[h'] = {mean}, expected {expected} (se {se})"
        );
    }

    #[test]
    fn fixed_point_solves_var_equation() {
        let p = published();
        let beta = var_fixed_point(&p).unwrap();
        for i in 0..5 {
            let b = &p.beta_blocks[i];
            let mut rhs = b.alpha;
            for j in 0..5 {
                rhs += b.theta[j] * beta[j];
            }
            if i == 1 {
                rhs += p.nu * beta[1];
            }
            assert!(
                (beta[i] - rhs).abs() < 1e-10,
                "fixed point residual at {i}: {} vs {}",
                beta[i],
                rhs
            );
        }
        // sanity: long-run ATM level should be a plausible volatility
        assert!(beta[0] > 0.05 && beta[0] < 0.6, "beta1* = {}", beta[0]);
    }

    #[test]
    fn synthetic_pool_rows_valid() {
        let p = published();
        let pool = make_synthetic_pool(&p, 252, 50, 7).unwrap();
        assert_eq!(pool.len(), 50);
        for row in &pool.rows {
            row.to_state().validate().unwrap();
        }
    }

    #[test]
    fn synthetic_pool_deterministic() {
        let p = published();
        let a = make_synthetic_pool(&p, 252, 1, 3).unwrap();
        let b = make_synthetic_pool(&p, 252, 1, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn simulate_zero_horizon_returns_initial_state() {
        let p = published();
        let pool = make_synthetic_pool(&p, 252, 5, 7).unwrap();
        let set = simulate(&p, &pool, 0, 1, 11).unwrap();
        assert_eq!(set.n_paths, 1);
        assert_eq!(set.horizon, 0);
        let state = set.state(0, 0);
        state.validate().unwrap();
        assert_eq!(state.s, 100.0);
    }

    #[test]
    fn simulate_deterministic_for_fixed_seed() {
        let p = published();
        let pool = make_synthetic_pool(&p, 252, 5, 7).unwrap();
        let a = simulate(&p, &pool, 10, 4, 123).unwrap();
        let b = simulate(&p, &pool, 10, 4, 123).unwrap();
        assert_eq!(a.s, b.s);
        assert_eq!(a.h_r, b.h_r);
        assert_eq!(a.innovations, b.innovations);
    }

    #[test]
    fn simulated_variances_stay_positive() {
        let p = published();
        let pool = make_synthetic_pool(&p, 252, 20, 7).unwrap();
        let set = simulate(&p, &pool, 63, 500, 77).unwrap();
        for path in 0..set.n_paths {
            for t in 0..=set.horizon {
                let st = set.state(path, t);
                assert!(st.h_r > 0.0);
                assert!(st.h.iter().all(|&h| h > 0.0));
            }
        }
    }

    #[test]
    fn return_mean_matches_psi_implied_drift() {
        // Simulated mean of (R - xi + psi(vol)) should be near zero:
        // the residual is vol * eps with E[eps] = 0.
        let p = published();
        let pool = make_synthetic_pool(&p, 252, 10, 7).unwrap();
        let set = simulate(&p, &pool, 21, 2000, 99).unwrap();
        let nig = nig_r(&p);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut n = 0usize;
        for path in 0..set.n_paths {
            for t in 1..=set.horizon {
                let prev_state = set.state(path, t - 1);
                let cur = set.state(path, t);
                let log_ret = (cur.s / prev_state.s).ln() - (p.r - p.q) * p.delta_t;
                let vol = (cur.h_r * p.delta_t).sqrt();
                let xi = equity_premium(cur.h_r, p.lambda, p.delta_t, &nig).unwrap();
                let resid = log_ret - xi + nig.psi(vol).unwrap();
                sum += resid;
                sum2 += resid * resid;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "residual mean {mean}, se {se}");
    }

    #[test]
    fn realized_innovations_are_serially_uncorrelated() {
        let p = published();
        let pool = make_synthetic_pool(&p, 252, 10, 7).unwrap();
        let set = simulate(&p, &pool, 63, 2000, 5).unwrap();
        let inn = set.innovations.as_ref().unwrap();
        let stride = set.horizon + 1;
        let mut num = 0.0;
        let mut den = 0.0;
        let mut count = 0usize;
        for path in 0..set.n_paths {
            for t in 1..set.horizon {
                let a = inn[path * stride + t][0];
                let b = inn[path * stride + t + 1][0];
                num += a * b;
                den += a * a;
                count += 1;
            }
        }
        let _ = count;
        let rho = num / den;
        assert!(rho.abs() < 0.01, "lag-1 autocorrelation {rho}");
    }

    #[test]
    fn anchor_attracts_variance() {
        // Holding beta fixed, E[h_{t+k,R}] approaches Y as k grows.
        let p = published();
        let marginals = p.marginals().unwrap();
        let nig = nig_r(&p);
        let base = sample_state();
        let anchor = surface::iv(0.0, ANCHOR_TAU, &base.beta).unwrap();
        let y = (p.return_block.omega * anchor).powi(2);
        let n_paths = 4000;
        let k = 500;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for path in 0..n_paths {
            let mut rng = path_rng(1234, path as u64);
            let mut h = base.h_r * 3.0; // start displaced from the anchor
            let mut prev = copula_sample(&mut rng, &p.copula, &marginals);
            for _ in 0..k {
                h = y + p.return_block.kappa * (h - y)
                    + p.return_block.a * h * news_impact(prev.return_innovation(), p.return_block.gamma);
                prev = copula_sample(&mut rng, &p.copula, &marginals);
            }
            sum += h;
            sum2 += h * h;
        }
        let _ = nig;
        let mean = sum / n_paths as f64;
        let se = ((sum2 / n_paths as f64 - mean * mean) / n_paths as f64).sqrt();
        assert!(
            (mean - y).abs() < 4.0 * se,
            "E[h] after {k} steps = {mean}, anchor {y}, se {se}"
        );
    }

    #[test]
    fn lognormal_market_log_returns_have_the_right_moments() {
        let (mu, sigma, dt) = (0.0892, 0.1952, 0.25 / 16.0);
        let set = simulate_lognormal(100.0, mu, sigma, 0.0, 0.0, dt, 16, 4000, 7).unwrap();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut n = 0usize;
        for path in 0..set.n_paths {
            for t in 0..set.horizon {
                let lr = (set.state(path, t + 1).s / set.state(path, t).s).ln();
                sum += lr;
                sum2 += lr * lr;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let target_mean = (mu - 0.5 * sigma * sigma) * dt;
        let target_var = sigma * sigma * dt;
        let se_mean = (target_var / n as f64).sqrt();
        assert!((mean - target_mean).abs() < 4.0 * se_mean, "mean {mean} vs {target_mean}");
        assert!((var / target_var - 1.0).abs() < 0.02, "var {var} vs {target_var}");
    }

    #[test]
    fn lognormal_market_surface_is_flat_at_sigma() {
        let set = simulate_lognormal(100.0, 0.05, 0.2, 0.01, 0.0, 1.0 / 252.0, 3, 2, 1).unwrap();
        let beta = set.state(1, 2).beta;
        for (m, tau) in [(0.0, 0.25), (0.5, 0.1), (-0.8, 1.0)] {
            assert_relative_eq!(surface::iv(m, tau, &beta).unwrap(), 0.2, max_relative = 1e-15);
            assert_relative_eq!(surface::dsigma_dm(m, tau, &beta).unwrap(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn lognormal_market_is_deterministic_and_path_stable() {
        let a = simulate_lognormal(100.0, 0.1, 0.2, 0.0, 0.0, 1.0 / 252.0, 4, 6, 3).unwrap();
        let b = simulate_lognormal(100.0, 0.1, 0.2, 0.0, 0.0, 1.0 / 252.0, 4, 6, 3).unwrap();
        assert_eq!(a.s, b.s);
        // path streams are independent of the path count
        let c = simulate_lognormal(100.0, 0.1, 0.2, 0.0, 0.0, 1.0 / 252.0, 4, 3, 3).unwrap();
        assert_eq!(&a.s[..c.s.len()], &c.s[..]);
    }
}
