//! Coarse-to-fine generator, conditional discriminator, their objectives and
//! the training loop.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod train;

pub use loss::{discriminator_loss, generator_loss, LossBreakdown, LossOptions};
pub use model::{Architecture, ClipStats, DiscMode, GanModel, Group};
pub use train::{EpochMetrics, TrainConfig, Trainer, TrainingData};
