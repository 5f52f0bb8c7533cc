//! Closed-form benchmark deltas: practitioner Black-Scholes, Leland's
//! transaction-cost adjustment, and the smile-implied delta that adds the
//! surface's moneyness slope.

use crate::error::{Error, Result};
use crate::surface::{self, SurfaceCoeffs};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Which closed-form hedger to use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchmarkKind {
    Bs,
    Leland {
        /// Rebalancing frequency per year (daily scheme: 252).
        rebalance_freq: f64,
    },
    SmileImplied,
}

/// Default Leland rebalancing frequency: daily.
pub const LELAND_DAILY_FREQ: f64 = 252.0;

fn check_inputs(s: f64, k: f64, tau: f64) -> Result<()> {
    if !(s > 0.0) || !(k > 0.0) {
        return Err(Error::domain(format!("spot and strike must be > 0, got S={s}, K={k}")));
    }
    if !(tau > 0.0) {
        return Err(Error::domain(format!("time to maturity must be > 0, got {tau}")));
    }
    Ok(())
}

/// d1 of the Black-Scholes formula, written in forward-moneyness form:
/// d = M/sigma + sigma*sqrt(tau)/2 with M the standardized log forward
/// moneyness.
fn d1(m: f64, tau: f64, sigma: f64) -> f64 {
    m / sigma + sigma * tau.sqrt() / 2.0
}

/// Black-Scholes price of a European call at a given volatility.
pub fn bs_price(s: f64, k: f64, tau: f64, sigma: f64, r: f64, q: f64) -> Result<f64> {
    check_inputs(s, k, tau)?;
    if !(sigma > 0.0) {
        return Err(Error::domain(format!("volatility must be > 0, got {sigma}")));
    }
    let normal = Normal::standard();
    let m = surface::moneyness(s, k, r, q, tau)?;
    let d = d1(m, tau, sigma);
    let d2 = d - sigma * tau.sqrt();
    Ok(s * (-q * tau).exp() * normal.cdf(d) - k * (-r * tau).exp() * normal.cdf(d2))
}

/// Practitioner Black-Scholes delta at the surface volatility.
pub fn bs_delta(s: f64, k: f64, tau: f64, beta: &SurfaceCoeffs, r: f64, q: f64) -> Result<f64> {
    check_inputs(s, k, tau)?;
    let m = surface::moneyness(s, k, r, q, tau)?;
    let sigma = surface::iv(m, tau, beta)?;
    let normal = Normal::standard();
    Ok((-q * tau).exp() * normal.cdf(d1(m, tau, sigma)))
}

/// Leland delta: the Black-Scholes delta at the transaction-cost-modified
/// volatility sigma_tilde^2 = sigma^2 * (1 + sqrt(2/pi) * 2 kappa /
/// (sigma * sqrt(freq))), where `freq` is rebalances per year.
pub fn leland_delta(
    s: f64,
    k: f64,
    tau: f64,
    beta: &SurfaceCoeffs,
    r: f64,
    q: f64,
    kappa: f64,
    rebalance_freq: f64,
) -> Result<f64> {
    check_inputs(s, k, tau)?;
    if !(rebalance_freq > 0.0) {
        return Err(Error::domain(format!("rebalance frequency must be > 0, got {rebalance_freq}")));
    }
    if kappa < 0.0 {
        return Err(Error::domain(format!("transaction cost rate must be >= 0, got {kappa}")));
    }
    let m = surface::moneyness(s, k, r, q, tau)?;
    let sigma = surface::iv(m, tau, beta)?;
    let adj = 1.0 + (2.0 / std::f64::consts::PI).sqrt() * 2.0 * kappa / (sigma * rebalance_freq.sqrt());
    let var = sigma * sigma * adj;
    if !(var > 0.0) {
        return Err(Error::domain(format!("modified variance must be > 0, got {var}")));
    }
    let sigma_mod = var.sqrt();
    let normal = Normal::standard();
    Ok((-q * tau).exp() * normal.cdf(d1(m, tau, sigma_mod)))
}

/// Smile-implied delta: Black-Scholes delta plus the correction from the
/// surface's moneyness slope, phi(d1) * dsigma/dM.
pub fn si_delta(s: f64, k: f64, tau: f64, beta: &SurfaceCoeffs, r: f64, q: f64) -> Result<f64> {
    check_inputs(s, k, tau)?;
    let m = surface::moneyness(s, k, r, q, tau)?;
    let sigma = surface::iv(m, tau, beta)?;
    let slope = surface::dsigma_dm(m, tau, beta)?;
    let normal = Normal::standard();
    let d = d1(m, tau, sigma);
    Ok((-q * tau).exp() * (normal.cdf(d) + normal.pdf(d) * slope))
}

/// Dispatches on the benchmark kind.
pub fn benchmark_delta(
    kind: BenchmarkKind,
    s: f64,
    k: f64,
    tau: f64,
    beta: &SurfaceCoeffs,
    r: f64,
    q: f64,
    kappa: f64,
) -> Result<f64> {
    match kind {
        BenchmarkKind::Bs => bs_delta(s, k, tau, beta, r, q),
        BenchmarkKind::Leland { rebalance_freq } => {
            leland_delta(s, k, tau, beta, r, q, kappa, rebalance_freq)
        }
        BenchmarkKind::SmileImplied => si_delta(s, k, tau, beta, r, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use statrs::distribution::ContinuousCDF;

    fn flat(level: f64) -> SurfaceCoeffs {
        SurfaceCoeffs::flat(level)
    }

    fn skewed() -> SurfaceCoeffs {
        SurfaceCoeffs { beta: [0.2, -0.04, 0.25, -0.07, -0.03] }
    }

    #[test]
    fn atm_bs_delta_flat_vol() {
        let d = bs_delta(100.0, 100.0, 0.25, &flat(0.2), 0.0, 0.0).unwrap();
        let expected = Normal::standard().cdf(0.05);
        assert_relative_eq!(d, expected, epsilon = 1e-12);
        assert_relative_eq!(d, 0.51994, epsilon = 1e-5);
    }

    #[test]
    fn deep_itm_delta_tends_to_discounted_one() {
        let q = 0.0177;
        let d = bs_delta(100.0, 10.0, 0.25, &flat(0.2), 0.0266, q).unwrap();
        assert!((d - (-q * 0.25f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn deep_otm_delta_tends_to_zero() {
        let d = bs_delta(100.0, 1000.0, 0.25, &flat(0.2), 0.0266, 0.0177).unwrap();
        assert!(d.abs() < 1e-9);
    }

    #[test]
    fn leland_with_zero_cost_is_bs_on_grid() {
        let beta = skewed();
        for i in 0..1000 {
            let s = 60.0 + 0.08 * i as f64;
            let bs = bs_delta(s, 100.0, 0.25, &beta, 0.0266, 0.0177).unwrap();
            let le = leland_delta(s, 100.0, 0.25, &beta, 0.0266, 0.0177, 0.0, LELAND_DAILY_FREQ)
                .unwrap();
            assert_eq!(bs, le, "mismatch at S={s}");
        }
    }

    #[test]
    fn leland_modified_vol_arithmetic() {
        // sigma=0.2, kappa=0.01, freq=252, tau=0.25, S=K=100, r=q=0
        let kappa = 0.01;
        let sigma: f64 = 0.2;
        let var_mod =
            sigma * sigma * (1.0 + (2.0 / std::f64::consts::PI).sqrt() * 2.0 * kappa / (sigma * 252f64.sqrt()));
        let expected = Normal::standard().cdf(var_mod.sqrt() * 0.25f64.sqrt() / 2.0);
        let got =
            leland_delta(100.0, 100.0, 0.25, &flat(0.2), 0.0, 0.0, kappa, 252.0).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-14);
    }

    #[test]
    fn leland_raises_atm_delta() {
        let bs = bs_delta(100.0, 100.0, 0.25, &flat(0.2), 0.0, 0.0).unwrap();
        let le = leland_delta(100.0, 100.0, 0.25, &flat(0.2), 0.0, 0.0, 0.01, 252.0).unwrap();
        assert!(le > bs, "leland {le} should exceed bs {bs} ATM");
    }

    #[test]
    fn si_equals_bs_without_smile_factors() {
        let beta = SurfaceCoeffs { beta: [0.2, -0.04, 0.0, 0.0, 0.0] };
        for i in 0..100 {
            let s = 70.0 + 0.6 * i as f64;
            let bs = bs_delta(s, 100.0, 0.25, &beta, 0.0266, 0.0177).unwrap();
            let si = si_delta(s, 100.0, 0.25, &beta, 0.0266, 0.0177).unwrap();
            assert_relative_eq!(bs, si, epsilon = 1e-12);
        }
    }

    #[test]
    fn negative_skew_lowers_si_delta_near_atm() {
        let beta = SurfaceCoeffs { beta: [0.2, -0.04, -0.25, 0.0, 0.0] };
        // just below the money: M slightly negative
        let s = 99.5;
        let bs = bs_delta(s, 100.0, 0.25, &beta, 0.0, 0.0).unwrap();
        let si = si_delta(s, 100.0, 0.25, &beta, 0.0, 0.0).unwrap();
        assert!(si < bs, "si {si} should be below bs {bs} with negative skew");
    }

    #[test]
    fn si_matches_finite_difference_surface_delta() {
        // Price with the surface held fixed in (M, tau) coordinates and
        // differentiate in S by central difference.
        let beta = skewed();
        let (k, tau, r, q) = (100.0, 0.25, 0.0266, 0.0177);
        for i in 0..50 {
            let s = 85.0 + 0.6 * i as f64;
            let m = surface::moneyness(s, k, r, q, tau).unwrap();
            if surface::iv_raw(m, tau, &beta).unwrap() < 0.02 {
                continue; // stay clear of the floor
            }
            let price = |sv: f64| {
                let mv = surface::moneyness(sv, k, r, q, tau).unwrap();
                let sigma = surface::iv(mv, tau, &beta).unwrap();
                bs_price(sv, k, tau, sigma, r, q).unwrap()
            };
            let h = 1e-4 * s;
            let fd = (price(s + h) - price(s - h)) / (2.0 * h);
            let si = si_delta(s, k, tau, &beta, r, q).unwrap();
            assert!(
                (si - fd).abs() < 1e-5,
                "S={s}: si {si} vs finite difference {fd}"
            );
        }
    }

    #[test]
    fn deltas_stay_in_sanity_envelope() {
        let beta = skewed();
        let (k, r, q) = (100.0, 0.0266, 0.0177);
        for i in 0..200 {
            let s = 50.0 + 0.5 * i as f64;
            for &tau in &[0.05, 0.25, 1.0] {
                let envelope = (-q * tau as f64).exp();
                let bs = bs_delta(s, k, tau, &beta, r, q).unwrap();
                let le = leland_delta(s, k, tau, &beta, r, q, 0.01, 252.0).unwrap();
                let si = si_delta(s, k, tau, &beta, r, q).unwrap();
                for d in [bs, le, si] {
                    assert!(
                        d > -0.1 * envelope && d < 1.1 * envelope,
                        "delta {d} outside envelope at S={s}, tau={tau}"
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let beta = flat(0.2);
        assert!(bs_delta(-1.0, 100.0, 0.25, &beta, 0.0, 0.0).is_err());
        assert!(bs_delta(100.0, 100.0, 0.0, &beta, 0.0, 0.0).is_err());
        assert!(leland_delta(100.0, 100.0, 0.25, &beta, 0.0, 0.0, -0.01, 252.0).is_err());
        assert!(leland_delta(100.0, 100.0, 0.25, &beta, 0.0, 0.0, 0.01, 0.0).is_err());
    }
}
