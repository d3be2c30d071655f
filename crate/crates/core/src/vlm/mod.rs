// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy vision-language transformer: synthetic tasks, model, training,
//! checkpoints.

pub(crate) mod backward;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod train;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint, TrainingMeta};
pub use config::ModelConfig;
pub use data::{generate_dataset, ImageGrid, SyntheticSample, Task};
pub use model::{ActivationTrace, LayerTrace, MlpHook, Model, ModelWeights, VisionTrace};
pub use train::{evaluate, train_model, TrainConfig};
