//! Gaussian-copula joint sampling of the six contemporaneous innovations
//! (return innovation first, then the five surface-factor innovations).

use super::nig::{Nig, NigParams};
use crate::error::{Error, Result};
use crate::linalg::cholesky;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub const N_INNOVATIONS: usize = 6;

/// Correlation matrix of the Gaussian copula with its Cholesky factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CopulaSpec {
    /// 6x6 symmetric correlation matrix, row-major, order (eps_R, eps_1..eps_5).
    pub corr: Vec<f64>,
    #[serde(skip)]
    chol: Vec<f64>,
}

impl CopulaSpec {
    pub fn new(corr: Vec<f64>) -> Result<Self> {
        let n = N_INNOVATIONS;
        if corr.len() != n * n {
            return Err(Error::config(format!(
                "correlation matrix must be {n}x{n}, got {} entries",
                corr.len()
            )));
        }
        for i in 0..n {
            if (corr[i * n + i] - 1.0).abs() > 1e-12 {
                return Err(Error::config(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..i {
                if (corr[i * n + j] - corr[j * n + i]).abs() > 1e-12 {
                    return Err(Error::config(format!("asymmetry at ({i},{j})")));
                }
            }
        }
        let chol = cholesky(&corr, n)
            .map_err(|e| Error::config(format!("invalid correlation matrix: {e}")))?;
        Ok(CopulaSpec { corr, chol })
    }

    pub fn identity() -> Self {
        let n = N_INNOVATIONS;
        let mut corr = vec![0.0; n * n];
        for i in 0..n {
            corr[i * n + i] = 1.0;
        }
        CopulaSpec::new(corr).unwrap()
    }

    /// Rebuilds the Cholesky factor after deserialization.
    pub fn validate(self) -> Result<Self> {
        CopulaSpec::new(self.corr)
    }

    /// Draws a correlated standard normal 6-vector.
    pub fn sample_normals<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; N_INNOVATIONS] {
        let n = N_INNOVATIONS;
        let mut z = [0.0; N_INNOVATIONS];
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
        }
        let mut out = [0.0; N_INNOVATIONS];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.chol[i * n + j] * z[j];
            }
            out[i] = acc;
        }
        out
    }
}

/// The six NIG marginals with their cached CDF grids.
#[derive(Debug, Clone)]
pub struct Marginals {
    nigs: Vec<Nig>,
}

impl Marginals {
    pub fn new(params: [NigParams; N_INNOVATIONS]) -> Result<Self> {
        let nigs = params.iter().map(|p| Nig::new(*p)).collect::<Result<Vec<_>>>()?;
        Ok(Marginals { nigs })
    }

    pub fn get(&self, i: usize) -> &Nig {
        &self.nigs[i]
    }
}

/// One time-step of joint innovations (eps_R, eps_1..eps_5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnovationVector {
    pub eps: [f64; N_INNOVATIONS],
}

impl InnovationVector {
    pub fn zero() -> Self {
        InnovationVector { eps: [0.0; N_INNOVATIONS] }
    }

    pub fn return_innovation(&self) -> f64 {
        self.eps[0]
    }

    pub fn beta_innovation(&self, i: usize) -> f64 {
        self.eps[1 + i]
    }
}

/// Draws one joint innovation vector: correlated normals mapped through the
/// standard normal CDF and each marginal's quantile function.
pub fn copula_sample<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &CopulaSpec,
    marginals: &Marginals,
) -> InnovationVector {
    let normal = Normal::standard();
    let z = spec.sample_normals(rng);
    let mut eps = [0.0; N_INNOVATIONS];
    for i in 0..N_INNOVATIONS {
        let u = normal.cdf(z[i]).clamp(1e-15, 1.0 - 1e-15);
        // quantile only fails for u outside (0,1), which the clamp prevents
        eps[i] = marginals.get(i).quantile(u).expect("u in (0,1)");
    }
    InnovationVector { eps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jivr::params::JivrParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::ContinuousCDF;

    fn published_marginals() -> Marginals {
        let p = JivrParams::published();
        p.marginals().unwrap()
    }

    #[test]
    fn rejects_wrong_shape() {
        assert!(CopulaSpec::new(vec![1.0; 10]).is_err());
    }

    #[test]
    fn rejects_non_unit_diagonal() {
        let mut corr = vec![0.0; 36];
        for i in 0..6 {
            corr[i * 6 + i] = 2.0;
        }
        assert!(CopulaSpec::new(corr).is_err());
    }

    #[test]
    fn rejects_non_positive_definite() {
        let mut corr = vec![0.0; 36];
        for i in 0..6 {
            corr[i * 6 + i] = 1.0;
        }
        corr[1] = 0.999;
        corr[6] = 0.999;
        corr[2] = 0.999;
        corr[12] = 0.999;
        corr[6 + 2] = -0.999;
        corr[2 * 6 + 1] = -0.999;
        assert!(CopulaSpec::new(corr).is_err());
    }

    #[test]
    fn identity_copula_factorizes() {
        // Pairwise Pearson correlations of normal scores near 0.
        let spec = CopulaSpec::identity();
        let marginals = published_marginals();
        let normal = Normal::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let mut scores = vec![[0.0f64; 6]; n];
        for row in scores.iter_mut() {
            let v = copula_sample(&mut rng, &spec, &marginals);
            for i in 0..6 {
                let u = marginals.get(i).cdf(v.eps[i]).clamp(1e-12, 1.0 - 1e-12);
                row[i] = normal.inverse_cdf(u);
            }
        }
        for a in 0..6 {
            for b in 0..a {
                let rho = pearson(&scores, a, b);
                assert!(rho.abs() < 0.01, "rho({a},{b}) = {rho}");
            }
        }
    }

    #[test]
    fn published_copula_reproduces_return_level_correlation() {
        let p = JivrParams::published();
        let spec = p.copula.clone();
        let marginals = published_marginals();
        let normal = Normal::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 500_000;
        let mut scores = vec![[0.0f64; 6]; n];
        for row in scores.iter_mut() {
            let v = copula_sample(&mut rng, &spec, &marginals);
            for i in 0..2 {
                let u = marginals.get(i).cdf(v.eps[i]).clamp(1e-12, 1.0 - 1e-12);
                row[i] = normal.inverse_cdf(u);
            }
        }
        let rho = pearson(&scores, 0, 1);
        assert!((rho + 0.550).abs() < 0.02, "rho(eps_R, eps_1) = {rho}");
    }

    #[test]
    fn marginals_preserved_under_copula() {
        let p = JivrParams::published();
        let spec = p.copula.clone();
        let marginals = published_marginals();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 200_000;
        let mut sums = [0.0f64; 6];
        let mut sums2 = [0.0f64; 6];
        for _ in 0..n {
            let v = copula_sample(&mut rng, &spec, &marginals);
            for i in 0..6 {
                sums[i] += v.eps[i];
                sums2[i] += v.eps[i] * v.eps[i];
            }
        }
        for i in 0..6 {
            let mean = sums[i] / n as f64;
            let var = sums2[i] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.01, "marginal {i} mean {mean}");
            assert!((var - 1.0).abs() < 0.02, "marginal {i} variance {var}");
        }
    }

    fn pearson(rows: &[[f64; 6]], a: usize, b: usize) -> f64 {
        let n = rows.len() as f64;
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for r in rows {
            sa += r[a];
            sb += r[b];
            saa += r[a] * r[a];
            sbb += r[b] * r[b];
            sab += r[a] * r[b];
        }
        let cov = sab / n - sa / n * (sb / n);
        let va = saa / n - (sa / n) * (sa / n);
        let vb = sbb / n - (sb / n) * (sb / n);
        cov / (va * vb).sqrt()
    }
}
