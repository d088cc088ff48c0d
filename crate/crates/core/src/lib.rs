//! Multicurrency trading engine built from stochastic wavelet decision units.
//!
//! Price paths are decomposed into dyadic wavelet coefficients, the coefficient
//! dynamics are fitted as a one-dimensional Ito diffusion, and entries/exits are
//! taken from the stationary density of that diffusion. Elementary decisions
//! are fused by a self-assembling structure (Boolean weight optimization,
//! correlation coupling, unit states, coarser-timeframe nesting) and traded
//! through a simulated broker whose statements follow the MetaTrader layout.
//!
//! Module map:
//! - [`market_data`]: quote series, CSV ingest, resampling, synthetic processes
//! - [`wavelet`]: Haar / Daubechies-4 periodic DWT
//! - [`sde`]: Kramers-Moyal drift/diffusion fit, stationary density, KS test
//! - [`decision`]: elementary dynamic/statistical criteria and indicators
//! - [`assembly`]: weight optimization, coupling, unit states, node tree
//! - [`portfolio`]: mean-risk reallocation and margin-bounded lot sizing
//! - [`ledger`]: simulated broker, trade records, account accounting
//! - [`report`]: statement parsing/rendering and summary statistics
//! - [`config`] and [`engine`]: the configured bar-by-bar backtest loop

pub mod assembly;
pub mod config;
pub mod decision;
pub mod engine;
pub mod error;
pub mod ledger;
pub mod market_data;
pub mod portfolio;
pub mod report;
pub mod sde;
pub mod wavelet;

pub use error::{Error, Result};
