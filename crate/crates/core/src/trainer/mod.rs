//! Configuration, checkpoints, augmentation, training, evaluation and prediction.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod report;
pub mod train;

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, Checkpoint};
pub use config::{load_config, parse_config, Preset, TrainConfig};
pub use evaluate::{evaluate, predict_files, score_episodes, EvalReport};
pub use train::{open_dataset, train, train_on, TrainOutcome};
