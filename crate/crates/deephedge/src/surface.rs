//! Five-factor implied-volatility surface.
//!
//! The surface is a linear combination of five basis functions of moneyness
//! and time-to-maturity: the long-term ATM level, the term-structure slope,
//! the moneyness slope, the smile attenuation and the smirk. A floor of 0.01
//! keeps the surface positive everywhere.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Maximum maturity supported by the surface, in years.
pub const T_MAX: f64 = 5.0;
/// Minimum maturity supported by the surface, in years.
pub const T_MIN: f64 = 6.0 / 252.0;
/// Convexity scale of the term-structure factor, in years.
pub const T_CONV: f64 = 0.25;
/// Floor applied to the surface value.
pub const IV_FLOOR: f64 = 0.01;

/// Factor loadings defining a full surface at one date.
///
/// `beta[0]` is in annualized-volatility units; the rest are dimensionless
/// loadings on the basis functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCoeffs {
    pub beta: [f64; 5],
}

impl SurfaceCoeffs {
    pub fn new(beta: [f64; 5]) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::domain("surface coefficients must be finite"));
        }
        Ok(SurfaceCoeffs { beta })
    }

    /// Flat surface at a constant volatility level.
    pub fn flat(level: f64) -> Self {
        SurfaceCoeffs {
            beta: [level, 0.0, 0.0, 0.0, 0.0],
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(T_MIN..=T_MAX).contains(&tau) {
        return Err(Error::domain(format!(
            "tau = {tau} outside surface maturity range [{T_MIN}, {T_MAX}]"
        )));
    }
    Ok(())
}

/// Moneyness coordinate: log-forward-moneyness scaled by `1/sqrt(tau)`.
pub fn moneyness(s: f64, k: f64, r: f64, q: f64, tau: f64) -> Result<f64> {
    if s <= 0.0 || k <= 0.0 || tau <= 0.0 {
        return Err(Error::domain(format!(
            "moneyness requires S > 0, K > 0, tau > 0 (got S={s}, K={k}, tau={tau})"
        )));
    }
    Ok((s * ((r - q) * tau).exp() / k).ln() / tau.sqrt())
}

/// Values of the five basis functions at the given coordinates.
pub fn factor_values(m: f64, tau: f64) -> Result<[f64; 5]> {
    check_tau(tau)?;
    let f1 = 1.0;
    let f2 = (-(tau / T_CONV).sqrt()).exp();
    let f3 = if m >= 0.0 { m } else { m.tanh() };
    let log_ratio = (tau / T_MAX).ln();
    let f4 = (1.0 - (-m * m).exp()) * log_ratio;
    let f5 = if m < 0.0 {
        (1.0 - (27.0 * m * m * m).exp()) * log_ratio
    } else {
        0.0
    };
    Ok([f1, f2, f3, f4, f5])
}

/// Implied volatility at the given coordinates, floored at [`IV_FLOOR`].
pub fn iv(m: f64, tau: f64, coeffs: &SurfaceCoeffs) -> Result<f64> {
    Ok(iv_raw(m, tau, coeffs)?.max(IV_FLOOR))
}

/// Un-floored surface value.
pub fn iv_raw(m: f64, tau: f64, coeffs: &SurfaceCoeffs) -> Result<f64> {
    let f = factor_values(m, tau)?;
    Ok(f.iter().zip(coeffs.beta.iter()).map(|(fi, bi)| fi * bi).sum())
}

/// Partial derivative of the surface with respect to moneyness.
///
/// Defined as 0 where the floor is active: the priced surface is constant
/// there.
pub fn dsigma_dm(m: f64, tau: f64, coeffs: &SurfaceCoeffs) -> Result<f64> {
    let raw = iv_raw(m, tau, coeffs)?;
    if raw < IV_FLOOR {
        return Ok(0.0);
    }
    let [_, _, b3, b4, b5] = [
        coeffs.beta[0],
        coeffs.beta[1],
        coeffs.beta[2],
        coeffs.beta[3],
        coeffs.beta[4],
    ];
    let log_ratio = (tau / T_MAX).ln();
    let d3 = if m >= 0.0 {
        b3
    } else {
        let t = m.tanh();
        b3 * (1.0 - t * t)
    };
    let d4 = b4 * 2.0 * m * (-m * m).exp() * log_ratio;
    let d5 = if m < 0.0 {
        -b5 * 81.0 * m * m * (27.0 * m * m * m).exp() * log_ratio
    } else {
        0.0
    };
    Ok(d3 + d4 + d5)
}
