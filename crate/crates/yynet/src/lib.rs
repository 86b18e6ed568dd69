//! IO, data pipeline, training driver and CLI support for the two-branch
//! network implemented in `yynet-core`.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod train;

pub use error::{AppError, AppResult};
