//! Discrete-time futures market engine: correlated price simulation, partial
//! information drift filtering, change of measure, slippage-aware wealth
//! dynamics and log-optimal trading.

// `!(x > 0.0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod filter;
pub mod io;
pub mod linalg;
pub mod market;
pub mod measure;
pub mod montecarlo;
pub mod policy;
pub mod rng;
pub mod scenario;
pub mod trading;
pub mod utility;
pub mod wealth;

pub use error::{Error, Result};
pub use market::{Convention, MarketParams, PathState, SimOptions};
