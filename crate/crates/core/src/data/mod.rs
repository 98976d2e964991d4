//! Manifest-driven data loading, canonicalization, splits and the synthetic generator.

pub mod audio;
pub mod canonical;
pub mod manifest;
pub mod split;
pub mod synth;

pub use audio::{load_sample, read_text_signal, read_wav, write_text_signal, write_wav};
pub use canonical::{canonicalize, canonicalize_one, Geometry};
pub use manifest::{class_counts, load_manifest, write_manifest, SampleRecord, Split, CLASS_NAMES, NUM_CLASSES};
pub use split::{partition, split_finetune, split_indices};
pub use synth::{synth_dataset, Generator, Role, SynthProfile};
