//! Classification and segmentation networks, their joint objective and training.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{LayerConfig, ModelConfig, Task, Variant};
pub use loss::{total_loss, KernelScale, LossConfig, LossTerms};
pub use metrics::{evaluate, Metrics};
pub use model::{max_interp_weight_error, Classifier, ForwardOutput, Model, Segmenter};
pub use train::{fit, AdamConfig, EpochLog, LrSchedule, TrainConfig, TrainState};
