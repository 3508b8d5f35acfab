//! Learning per-cell ensemble weights over black-box quantile forecasters.
//!
//! Weights are fit on one backtest window by minimizing an entropy- and
//! L1-regularized mean weighted quantile loss, the regularization vector is
//! chosen on a second window, and the chosen ensemble is scored on a third.

pub mod bounds;
pub mod cli;
pub mod data;
pub mod error;
pub mod format;
pub mod loss;
pub mod objective;
pub mod optimize;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
