//! Toy decoder, synthetic tasks, and adapter training.

pub mod config;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod train;

pub use config::{ModelConfig, ModulePath, ModuleType};
pub use model::{argmax, Batch, DeltaNodes, Layer, ToyModel};
pub use optim::{Optimizer, OptimizerKind};
pub use tasks::{generate_task, standard_suite, Example, TaskDataset, TaskDescriptor};
pub use train::{build_synthetic_pool, train_lora, train_target_lora, Coverage, LoraTrainConfig, TrainedLora};
