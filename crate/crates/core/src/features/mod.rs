//! Log-Mel spectrogram, learned temporal features and their fusion.

pub mod cache;
pub mod map;
pub mod spectral;
pub mod tgram;

pub use map::{assemble, Channel, FeatureMap, Variant};
pub use spectral::{log_mel, mel_weights, stft_power, LogMel, MelConfig, MelFilterbank, StftConfig, Window};
pub use tgram::{tgram_forward, Stream, TgramConfig};
