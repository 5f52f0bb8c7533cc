//! Standardized normal-inverse-Gaussian distribution.
//!
//! The distribution is parameterized by asymmetry `zeta` and tail weight
//! `phi` and standardized to zero mean, unit variance. Internally it maps to
//! the classical (alpha, beta, delta, mu) parameterization with
//! `beta = zeta`, `gamma = phi` (so `alpha = sqrt(phi^2 + zeta^2)`) and the
//! affine constants pinned down by the two moment conditions:
//! `delta = phi^3 / (phi^2 + zeta^2)`, `mu = -phi^2 zeta / (phi^2 + zeta^2)`.
//!
//! Sampling uses the exact inverse-Gaussian mixing representation; the
//! quantile function inverts a cached quadrature CDF grid.

use super::bessel::bessel_k1;
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, InverseGaussian, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    /// Asymmetry parameter.
    pub zeta: f64,
    /// Tail weight parameter, > 0.
    pub phi: f64,
}

/// A standardized NIG distribution with its cached CDF grid.
///
/// Immutable after construction; safe to share between threads.
#[derive(Debug, Clone)]
pub struct Nig {
    params: NigParams,
    alpha: f64,
    delta: f64,
    mu: f64,
    // CDF grid: cdf[i] at x_lo + i * h, normalized to end at 1.
    x_lo: f64,
    h: f64,
    cdf: Vec<f64>,
}

const GRID_CELLS: usize = 20_000;
const QUANTILE_TOL: f64 = 1e-10;

impl Nig {
    pub fn new(params: NigParams) -> Result<Self> {
        if !(params.phi > 0.0) || !params.phi.is_finite() || !params.zeta.is_finite() {
            return Err(Error::domain(format!(
                "NIG requires finite zeta and phi > 0 (got zeta={}, phi={})",
                params.zeta, params.phi
            )));
        }
        let NigParams { zeta, phi } = params;
        let a2 = phi * phi + zeta * zeta;
        let alpha = a2.sqrt();
        let delta = phi * phi * phi / a2;
        let mu = -phi * phi * zeta / a2;

        let mut nig = Nig {
            params,
            alpha,
            delta,
            mu,
            x_lo: 0.0,
            h: 0.0,
            cdf: Vec::new(),
        };
        nig.build_cdf_grid();
        nig.verify_standardization()?;
        Ok(nig)
    }

    pub fn params(&self) -> NigParams {
        self.params
    }

    /// Cumulant generating function of the standardized variable.
    ///
    /// Valid on the strip `-sqrt(zeta^2+phi^2) - zeta < z < sqrt(zeta^2+phi^2) - zeta`.
    pub fn psi(&self, z: f64) -> Result<f64> {
        let NigParams { zeta, phi } = self.params;
        let a2 = phi * phi + zeta * zeta;
        let strip = a2.sqrt();
        if z <= -strip - zeta || z >= strip - zeta {
            return Err(Error::domain(format!(
                "psi argument {z} outside convergence strip ({}, {})",
                -strip - zeta,
                strip - zeta
            )));
        }
        let radical = (a2 - (zeta + z) * (zeta + z)).sqrt();
        Ok(phi * phi / a2 * (-zeta * z + phi * phi - phi * radical))
    }

    /// Density of the standardized variable.
    pub fn pdf(&self, x: f64) -> f64 {
        let y = x - self.mu;
        let s = (self.delta * self.delta + y * y).sqrt();
        let arg = self.alpha * s;
        // f(x) = alpha delta / pi * exp(delta gamma + beta y) K1(alpha s) / s
        let log_prefactor = self.delta * self.params.phi + self.params.zeta * y;
        self.alpha * self.delta / std::f64::consts::PI * log_prefactor.exp() * bessel_k1(arg) / s
    }

    /// CDF from the cached quadrature grid (linear in the grid with local
    /// Gauss-Legendre correction).
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.x_lo {
            return 0.0;
        }
        let x_hi = self.x_lo + self.h * (self.cdf.len() - 1) as f64;
        if x >= x_hi {
            return 1.0;
        }
        let idx = ((x - self.x_lo) / self.h).floor() as usize;
        let x_i = self.x_lo + idx as f64 * self.h;
        (self.cdf[idx] + self.gauss5(x_i, x)).min(1.0)
    }

    /// Quantile function: returns x with CDF(x) = u.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::domain(format!("quantile requires u in (0,1), got {u}")));
        }
        let n = self.cdf.len();
        // binary search for the bracketing cell
        let mut lo = 0usize;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cdf[mid] <= u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x_i = self.x_lo + lo as f64 * self.h;
        let (c0, c1) = (self.cdf[lo], self.cdf[hi]);
        let mut x = if c1 > c0 {
            x_i + self.h * (u - c0) / (c1 - c0)
        } else {
            x_i + 0.5 * self.h
        };
        // Newton iterations on F(x) - u with the pdf as derivative
        for _ in 0..50 {
            let f = c0 + self.gauss5(x_i, x) - u;
            if f.abs() < QUANTILE_TOL {
                return Ok(x);
            }
            let d = self.pdf(x);
            if d <= 0.0 {
                break;
            }
            x = (x - f / d).clamp(x_i, x_i + self.h);
        }
        // fall back to bisection within the cell
        let (mut a, mut b) = (x_i, x_i + self.h);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let f = c0 + self.gauss5(x_i, mid) - u;
            if f.abs() < QUANTILE_TOL {
                return Ok(mid);
            }
            if f < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// Draws one standardized variate via inverse-Gaussian mixing.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // W ~ IG(delta/gamma, delta^2), X | W ~ N(mu + zeta W, W)
        let ig = InverseGaussian::new(self.delta / self.params.phi, self.delta * self.delta)
            .expect("valid IG parameters");
        let w: f64 = ig.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        self.mu + self.params.zeta * w + w.sqrt() * z
    }

    fn build_cdf_grid(&mut self) {
        // Exponential tail decay rate is alpha - |zeta|; size the grid so the
        // truncated mass is negligible.
        let rate = (self.alpha - self.params.zeta.abs()).max(0.05);
        let half_width = (80.0 / rate).clamp(20.0, 400.0);
        self.x_lo = self.mu - half_width;
        let x_hi = self.mu + half_width;
        self.h = (x_hi - self.x_lo) / GRID_CELLS as f64;
        let mut cdf = Vec::with_capacity(GRID_CELLS + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        let mut f_left = self.pdf(self.x_lo);
        for i in 0..GRID_CELLS {
            let x0 = self.x_lo + i as f64 * self.h;
            let x1 = x0 + self.h;
            let f_mid = self.pdf(x0 + 0.5 * self.h);
            let f_right = self.pdf(x1);
            acc += self.h / 6.0 * (f_left + 4.0 * f_mid + f_right);
            cdf.push(acc);
            f_left = f_right;
        }
        // normalize so the grid spans exactly (0, 1)
        let total = acc;
        for c in cdf.iter_mut() {
            *c /= total;
        }
        self.cdf = cdf;
    }

    /// 5-point Gauss-Legendre integral of the pdf over [a, b], normalized by
    /// the grid total (the grid is stored normalized, so local corrections
    /// must be as well). The cells are narrow, so this is exact to roundoff.
    fn gauss5(&self, a: f64, b: f64) -> f64 {
        const XS: [f64; 5] = [
            -0.906179845938664,
            -0.538469310105683,
            0.0,
            0.538469310105683,
            0.906179845938664,
        ];
        const WS: [f64; 5] = [
            0.236926885056189,
            0.478628670499366,
            0.568888888888889,
            0.478628670499366,
            0.236926885056189,
        ];
        let c = 0.5 * (a + b);
        let hw = 0.5 * (b - a);
        let mut s = 0.0;
        for (x, w) in XS.iter().zip(WS.iter()) {
            s += w * self.pdf(c + hw * x);
        }
        s * hw
    }

    fn verify_standardization(&self) -> Result<()> {
        // psi'(0) = 0 and psi''(0) = 1 by construction; check numerically.
        let h = 1e-5;
        let p = self.psi(h)?;
        let m = self.psi(-h)?;
        let d1 = (p - m) / (2.0 * h);
        let d2 = (p + m) / (h * h);
        if d1.abs() > 1e-6 || (d2 - 1.0).abs() > 1e-4 {
            return Err(Error::domain(format!(
                "NIG standardization failed: psi'(0)={d1:.2e}, psi''(0)={d2:.6}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// S&P 500 innovation parameters.
    fn sp500() -> Nig {
        Nig::new(NigParams {
            zeta: -0.641306,
            phi: 2.039669,
        })
        .unwrap()
    }

    #[test]
    fn psi_zero_is_zero() {
        for nig in [
            sp500(),
            Nig::new(NigParams { zeta: 0.852943, phi: 1.538928 }).unwrap(),
            Nig::new(NigParams { zeta: 0.0, phi: 1.0 }).unwrap(),
        ] {
            assert_eq!(nig.psi(0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn psi_moment_conditions() {
        let nig = sp500();
        // h = 1e-4 keeps the second-difference rounding error near 1e-8
        // while the truncation error stays below 1e-8 as well
        let h = 1e-4;
        let d1 = (nig.psi(h).unwrap() - nig.psi(-h).unwrap()) / (2.0 * h);
        let d2 = (nig.psi(h).unwrap() + nig.psi(-h).unwrap()) / (h * h);
        assert!(d1.abs() < 1e-6, "psi'(0) = {d1}");
        assert!((d2 - 1.0).abs() < 1e-6, "psi''(0) = {d2}");
    }

    #[test]
    fn psi_rejects_outside_strip() {
        let nig = sp500();
        let strip = (0.641306f64 * 0.641306 + 2.039669 * 2.039669).sqrt();
        assert!(nig.psi(strip + 0.641306 + 0.01).is_err());
        assert!(nig.psi(-strip + 0.641306 - 0.01).is_err());
    }

    #[test]
    fn pdf_integrates_to_one() {
        // Adaptive-step Simpson oracle over [-30, 30], independent of the
        // cached grid resolution.
        let nig = sp500();
        let n = 60_000;
        let h = 60.0 / n as f64;
        let mut total = 0.0;
        let mut mean = 0.0;
        let mut var = 0.0;
        for i in 0..n {
            let x0 = -30.0 + i as f64 * h;
            let xm = x0 + 0.5 * h;
            let x1 = x0 + h;
            let (f0, fm, f1) = (nig.pdf(x0), nig.pdf(xm), nig.pdf(x1));
            total += h / 6.0 * (f0 + 4.0 * fm + f1);
            mean += h / 6.0 * (x0 * f0 + 4.0 * xm * fm + x1 * f1);
            var += h / 6.0 * (x0 * x0 * f0 + 4.0 * xm * xm * fm + x1 * x1 * f1);
        }
        assert!((0.9999..=1.0001).contains(&total), "total mass {total}");
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "variance {var}");
    }

    #[test]
    fn mode_sign_opposite_to_zeta() {
        // Negative zeta skews the distribution left, pushing the mode right
        // of the (zero) mean.
        let nig = sp500();
        let mode = (0..4000)
            .map(|i| -2.0 + i as f64 * 1e-3)
            .max_by(|&a, &b| nig.pdf(a).partial_cmp(&nig.pdf(b)).unwrap())
            .unwrap();
        assert!(mode > 0.0, "mode {mode} should be right of 0 for zeta < 0");
        let pos = Nig::new(NigParams { zeta: 0.852943, phi: 1.538928 }).unwrap();
        let mode_pos = (0..4000)
            .map(|i| -2.0 + i as f64 * 1e-3)
            .max_by(|&a, &b| pos.pdf(a).partial_cmp(&pos.pdf(b)).unwrap())
            .unwrap();
        assert!(mode_pos < 0.0);
    }

    #[test]
    fn quantile_cdf_roundtrip() {
        let nig = sp500();
        for x in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let u = nig.cdf(x);
            let back = nig.quantile(u).unwrap();
            assert!((back - x).abs() < 1e-6, "roundtrip at {x}: {back}");
        }
    }

    #[test]
    fn quantile_roundtrip_wide_range() {
        let nig = sp500();
        for i in 0..=100 {
            let x = -5.0 + 0.1 * i as f64;
            let u = nig.cdf(x);
            if u <= 0.0 || u >= 1.0 {
                continue;
            }
            let back = nig.quantile(u).unwrap();
            assert!((nig.cdf(back) - u).abs() < 1e-6);
        }
    }

    #[test]
    fn quantile_monotone() {
        let nig = sp500();
        let mut prev = f64::NEG_INFINITY;
        for i in 1..1000 {
            let u = i as f64 / 1000.0;
            let x = nig.quantile(u).unwrap();
            assert!(x > prev, "quantile not monotone at u={u}");
            prev = x;
        }
    }

    #[test]
    fn quantile_rejects_invalid_u() {
        let nig = sp500();
        assert!(nig.quantile(0.0).is_err());
        assert!(nig.quantile(1.0).is_err());
        assert!(nig.quantile(-0.5).is_err());
    }

    #[test]
    fn sample_moments() {
        let nig = sp500();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let x = nig.sample(&mut rng);
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.005, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "sample variance {var}");
    }

    #[test]
    fn sampler_agrees_with_quantile_transform() {
        // Two-sample Kolmogorov distance between the mixing sampler and the
        // quantile-transform sampler.
        let nig = sp500();
        let n = 1_000_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut a: Vec<f64> = (0..n).map(|_| nig.sample(&mut rng)).collect();
        let mut rng2 = ChaCha8Rng::seed_from_u64(8);
        let mut b: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng2.gen_range(1e-12..1.0);
                nig.quantile(u).unwrap()
            })
            .collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut ks: f64 = 0.0;
        let (mut i, mut j) = (0usize, 0usize);
        while i < n && j < n {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 / n as f64 - j as f64 / n as f64).abs());
        }
        assert!(ks < 0.002, "KS distance {ks}");
    }

    #[test]
    fn empirical_quantile_matches() {
        let nig = sp500();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000usize;
        let mut xs: Vec<f64> = (0..n).map(|_| nig.sample(&mut rng)).collect();
        xs.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let emp95 = xs[(0.95 * n as f64) as usize];
        let q95 = nig.quantile(0.95).unwrap();
        assert!((emp95 - q95).abs() < 0.01, "empirical {emp95} vs {q95}");
    }

    #[test]
    fn mgf_matches_psi() {
        // |mean(e^{0.1 eps}) - e^{psi(0.1)}| < 3 standard errors at n = 1e6.
        let nig = sp500();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let v = (0.1 * nig.sample(&mut rng)).exp();
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        let target = nig.psi(0.1).unwrap().exp();
        assert!(
            (mean - target).abs() < 3.0 * se,
            "MGF mismatch: {mean} vs {target} (se {se})"
        );
    }
}
