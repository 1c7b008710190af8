//! Configuration, optimisation, checkpoints and the training loop.

pub mod config;
pub mod features;
pub mod optim;
pub mod predict;
pub mod sweep;
pub mod trainer;

pub use config::{Config, Paths};
pub use features::Features;
pub use optim::{adamax_step, lr_schedule, AdamaxParams, AdamaxState};
pub use predict::{cross_attention, predict, predict_nouns, rank_verbs, Conditioning};
pub use sweep::{sweep, SweepCell, SweepReport, ABLATION_HEADS, ABLATION_LAYERS};
pub use trainer::{
    check_compatible, check_encoder, last_checkpoint_path, load_model, Dataset, EpochRecord, TrainState,
    TrainSummary, Trainer,
};
