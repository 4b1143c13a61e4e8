//! Adaptive prompt tuning for few-shot pixel-wise anomaly detection.
//!
//! Learnable normality/abnormality prompts are tuned against synthetic
//! feature-space anomalies on a frozen toy vision-language encoder, guided
//! by meta prompts with gradient calibration and periodic meta refresh.

pub mod config;
pub mod data;
pub mod diff;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod feature_gen;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pretrain;
pub mod prompts;
pub mod scoring;
pub mod tuning;

pub use error::{Error, Result};
