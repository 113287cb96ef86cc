//! Simulation, hedging and deep-hedging engine for green power purchase
//! agreements under the cannibalisation effect.
//!
//! * [`ou`] and [`sigmoid`]: Ornstein–Uhlenbeck primitives and the call-sum
//!   replication of the logistic efficiency map.
//! * [`market`]: calibrated infeed/forward-price model and path simulation.
//! * [`hedging`]: strategies, PnL accumulation and risk statistics.
//! * [`neural`]: feed-forward network strategy trained on Expected Shortfall.
//! * [`config`] and [`commands`]: run configuration and the CLI workflows.

pub mod commands;
pub mod config;
pub mod error;
pub mod hedging;
pub mod market;
pub mod neural;
pub mod ou;
pub mod rng;
pub mod sigmoid;

pub use error::{Error, Result};
pub use market::{MarketModel, MarketParams, MarketState, ScenarioBatch, Technology};
pub use ou::{GaussLaw, OuParams};
pub use sigmoid::SigmoidGrid;
