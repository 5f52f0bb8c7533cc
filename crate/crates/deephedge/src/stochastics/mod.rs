//! Standardized NIG marginals and Gaussian-copula joint innovation sampling.

mod bessel;
mod copula;
mod nig;

pub use copula::{copula_sample, CopulaSpec, InnovationVector, Marginals, N_INNOVATIONS};
pub use nig::{Nig, NigParams};
