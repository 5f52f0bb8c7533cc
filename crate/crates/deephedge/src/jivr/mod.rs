//! The joint index-return / implied-volatility-surface market model:
//! parameters, state, transition equations, simulation, and path storage.

pub mod params;
pub mod pathset;
pub mod simulate;
pub mod state;

pub use params::JivrParams;
pub use pathset::PathSet;
pub use simulate::{
    equity_premium, make_synthetic_pool, path_rng, simulate, simulate_lognormal, step,
    var_fixed_point,
};
pub use state::{MarketState, PoolRow, StatePool};
