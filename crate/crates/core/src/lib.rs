//! Acoustic-vibration bearing fault diagnosis: waveform preprocessing, log-Mel and learned
//! temporal features, a MobileFaceNet-style embedding network trained with an additive
//! angular margin loss, synthetic dataset generation and pretrain/fine-tune pipelines.

pub mod data;
pub mod error;
pub mod features;
pub(crate) mod io;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod signal;

pub use error::{Error, Result};
