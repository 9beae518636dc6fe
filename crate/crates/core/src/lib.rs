//! Streaming detection and localization of clustered, persistent hot-spots in video.

pub mod baselines;
pub mod decomp;
pub mod error;
pub mod experiment;
pub mod frame;
pub mod metrics;
pub mod monitor;
pub mod simulate;

pub use error::{Error, Result};
