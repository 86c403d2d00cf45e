//! Unified multi-speaker encoder: a shared layered speech encoder whose
//! per-task residual weighted-sum features drive diarization, separation and
//! multi-speaker ASR heads, with a synthetic mixture simulator, metrics and a
//! multi-task trainer.

mod error;

pub mod asr;
pub mod config;
pub mod dataset;
pub mod diar;
pub mod encoder;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perm;
pub mod sep;
pub mod sim;
pub mod train;

pub use error::{Result, UmeError};
