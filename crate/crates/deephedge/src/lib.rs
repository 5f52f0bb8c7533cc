//! Deep hedging laboratory for S&P 500 options.
//!
//! The library simulates the joint dynamics of the index excess return and a
//! five-factor implied-volatility surface (NGARCH variances, NIG innovations,
//! Gaussian copula), prices and hedges European calls off the simulated
//! surface, trains a leverage-constrained LSTM/feedforward hedging policy by
//! risk-sensitive policy gradient, and benchmarks it against closed-form
//! delta hedgers.
//!
//! Module map:
//! - [`surface`]: the five-factor IV surface and its moneyness derivative
//! - [`stochastics`]: standardized NIG distribution and Gaussian copula
//! - [`jivr`]: state-transition equations, path simulator, state pools
//! - [`hedging`]: self-financing accounting, leverage bound, hedge engine
//! - [`benchmarks`]: Black-Scholes, Leland and smile-implied deltas
//! - [`neural`]: tape autodiff, LSTM/FFNN policy network, ADAM
//! - [`training`]: penalty estimators, training loop, metrics, SAGE, backtest

pub mod benchmarks;
pub mod error;
pub mod hedging;
pub mod jivr;
pub mod linalg;
pub mod manifest;
pub mod neural;
pub mod stochastics;
pub mod surface;
pub mod training;

pub use error::{Error, Result};
