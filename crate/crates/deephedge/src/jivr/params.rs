//! JIVR model parameters and the versioned JSON parameter file.
//!
//! Variance recursions run in annualized units: the conditional variances
//! `h` are variance-per-year, the tabulated `sigma * sqrt(252)` values are
//! used directly as annualized anchor volatilities, and innovations enter
//! scaled by `sqrt(h * delta_t)`. The per-day sigma is recorded alongside
//! for reference.

use crate::error::{Error, Result};
use crate::stochastics::{CopulaSpec, Marginals, NigParams};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const TRADING_DAYS: f64 = 252.0;

/// NGARCH block for the index excess return.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReturnBlock {
    pub kappa: f64,
    pub gamma: f64,
    pub a: f64,
    /// Anchor weight on the one-month ATM implied volatility.
    pub omega: f64,
    pub zeta: f64,
    pub phi: f64,
}

/// Autoregressive + NGARCH block for one surface factor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BetaBlock {
    pub alpha: f64,
    /// Loadings theta_{i,1..5} on the previous-day factor vector.
    pub theta: [f64; 5],
    /// Annualized anchor volatility (the tabulated sigma*sqrt(252)); absent
    /// for beta_1, whose variance is anchored to the surface instead.
    pub sigma_annual: Option<f64>,
    pub kappa: f64,
    pub a: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub phi: f64,
}

impl BetaBlock {
    /// Per-day sigma implied by the annualized table value.
    pub fn sigma_daily(&self) -> Option<f64> {
        self.sigma_annual.map(|s| s / TRADING_DAYS.sqrt())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JivrParams {
    /// Equity premium coefficient.
    pub lambda: f64,
    pub return_block: ReturnBlock,
    pub beta_blocks: [BetaBlock; 5],
    /// Anchor weight for the beta_1 conditional variance.
    pub omega_1: f64,
    /// Extra second-lag coefficient in the beta_2 equation.
    pub nu: f64,
    pub copula: CopulaSpec,
    /// Annualized risk-free rate.
    pub r: f64,
    /// Annualized dividend yield.
    pub q: f64,
    /// Step length in years.
    pub delta_t: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsFile {
    version: u32,
    params: JivrParams,
}

const PARAMS_FILE_VERSION: u32 = 1;

impl JivrParams {
    /// Parameter estimates transcribed from the published JIVR tables
    /// (S&P 500, January 1996 - December 2020 sample).
    pub fn published() -> Self {
        let corr: Vec<f64> = {
            // lower triangle, order (eps_R, eps_1..eps_5)
            let rows: [[f64; 6]; 6] = [
                [1.000, -0.550, -0.690, 0.030, -0.220, -0.340],
                [-0.550, 1.000, 0.140, -0.030, 0.250, 0.170],
                [-0.690, 0.140, 1.000, -0.010, 0.120, 0.370],
                [0.030, -0.030, -0.010, 1.000, 0.280, 0.130],
                [-0.220, 0.250, 0.120, 0.280, 1.000, -0.050],
                [-0.340, 0.170, 0.370, 0.130, -0.050, 1.000],
            ];
            rows.iter().flatten().copied().collect()
        };
        JivrParams {
            lambda: 2.711279,
            return_block: ReturnBlock {
                kappa: 0.888977,
                gamma: 2.507796,
                a: 0.056087,
                omega: 0.977291,
                zeta: -0.641306,
                phi: 2.039669,
            },
            beta_blocks: [
                BetaBlock {
                    alpha: 0.000899,
                    theta: [0.996290, 0.003669, 0.0, 0.0, 0.0],
                    sigma_annual: None,
                    kappa: 0.838220,
                    a: 0.134152,
                    gamma: -0.111813,
                    zeta: 0.143760,
                    phi: 1.351070,
                },
                BetaBlock {
                    alpha: 0.008400,
                    theta: [-0.013869, 0.877813, -0.032640, 0.0, -0.047789],
                    sigma_annual: Some(0.380279),
                    kappa: 0.965751,
                    a: 0.098272,
                    gamma: -1.482862,
                    zeta: 0.852943,
                    phi: 1.538928,
                },
                BetaBlock {
                    alpha: 0.000770,
                    theta: [0.0, 0.001300, 0.997071, 0.0, 0.0],
                    sigma_annual: Some(0.052198),
                    kappa: 0.974251,
                    a: 0.092646,
                    gamma: 0.096766,
                    zeta: 0.029109,
                    phi: 2.284780,
                },
                BetaBlock {
                    alpha: -0.001393,
                    theta: [0.002841, 0.0, 0.003722, 0.980269, 0.0],
                    sigma_annual: Some(0.048641),
                    kappa: 0.945377,
                    a: 0.102201,
                    gamma: 0.060558,
                    zeta: -0.159051,
                    phi: 1.449977,
                },
                BetaBlock {
                    alpha: 0.000657,
                    theta: [0.0, 0.0, -0.004198, 0.0, 0.986019],
                    sigma_annual: Some(0.051536),
                    kappa: 0.980844,
                    a: 0.100502,
                    gamma: -0.102996,
                    zeta: 0.092664,
                    phi: 1.428477,
                },
            ],
            omega_1: 0.267589,
            nu: 0.089445,
            copula: CopulaSpec::new(corr).expect("published copula is positive definite"),
            r: 0.0266,
            q: 0.0177,
            delta_t: 1.0 / TRADING_DAYS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_kappa = |name: &str, k: f64| -> Result<()> {
            if !(0.0..1.0).contains(&k) {
                return Err(Error::config(format!("{name} kappa = {k} outside (0,1)")));
            }
            Ok(())
        };
        check_kappa("return", self.return_block.kappa)?;
        for (i, b) in self.beta_blocks.iter().enumerate() {
            check_kappa(&format!("beta_{}", i + 1), b.kappa)?;
            if let Some(s) = b.sigma_annual {
                if s <= 0.0 {
                    return Err(Error::config(format!("beta_{} sigma must be > 0", i + 1)));
                }
            }
        }
        if self.delta_t <= 0.0 {
            return Err(Error::config("delta_t must be > 0"));
        }
        // NIG parameter validity
        self.marginals()?;
        Ok(())
    }

    /// NIG parameters in innovation order (eps_R, eps_1..eps_5).
    pub fn nig_params(&self) -> [NigParams; 6] {
        [
            NigParams { zeta: self.return_block.zeta, phi: self.return_block.phi },
            NigParams { zeta: self.beta_blocks[0].zeta, phi: self.beta_blocks[0].phi },
            NigParams { zeta: self.beta_blocks[1].zeta, phi: self.beta_blocks[1].phi },
            NigParams { zeta: self.beta_blocks[2].zeta, phi: self.beta_blocks[2].phi },
            NigParams { zeta: self.beta_blocks[3].zeta, phi: self.beta_blocks[3].phi },
            NigParams { zeta: self.beta_blocks[4].zeta, phi: self.beta_blocks[4].phi },
        ]
    }

    /// Builds the six NIG marginals (cached CDF grids included).
    pub fn marginals(&self) -> Result<Marginals> {
        Marginals::new(self.nig_params())
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let file = ParamsFile { version: PARAMS_FILE_VERSION, params: self.clone() };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read parameter file {}: {e}", path.display())))?;
        let file: ParamsFile = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("parameter file {}: {e}", path.display())))?;
        if file.version != PARAMS_FILE_VERSION {
            return Err(Error::format(format!(
                "unsupported parameter file version {} (expected {PARAMS_FILE_VERSION})",
                file.version
            )));
        }
        let mut params = file.params;
        params.copula = params.copula.validate()?;
        params.validate()?;
        Ok(params)
    }

    /// SHA-256 of the canonical JSON encoding, for run manifests.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("params serialize");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
