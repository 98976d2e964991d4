//! Pre-training, fine-tuning, evaluation and checkpoint persistence.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
pub use config::{DataSource, HeadInit, ModelSpec, Preset, SpeedConfig, TrainConfig};
pub use experiment::{run_transfer, run_transfer_budgets, synth_prepared, TransferData, TransferRun, TransferSetup};
pub use eval::{evaluate, evaluate_model, predict, Report};
pub use model::{embed, Batch, FeatureBuilder, ItemInputs, Model, Prepared};
pub use train::{finetune, prepare, prepare_waves, pretrain, EpochMetrics, TrainOutcome, FINETUNE_GROUPS};
