//! Daily price forecasting with GRU encoders and group-level Shapley
//! attribution.
//!
//! The pipeline ingests a daily OHLCV series plus optional exogenous
//! series, builds technical indicator features, clusters text embeddings
//! into semantic groups whose daily sentiment becomes a second feature
//! stream, trains a two-encoder GRU forecaster walk-forward over rolling
//! year windows, and attributes predictions to feature groups with exact
//! Shapley values (sampled permutation estimates at token granularity).

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod forecaster;
pub mod grouping;
pub mod market_data;
pub mod pipeline;
pub mod shapley;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
