//! End-to-end training, inference, metrics and model variants.

mod checkpoint;
mod config;
mod metrics;
mod model;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use config::{DpmConfig, PriorConfig, TrainConfig, Variant};
pub use metrics::{metrics, mse, Metrics};
pub use model::{build_variant, predict, Head, Predictions, TsnetModel};
pub use optim::{clip_global_norm, Adam};
pub(crate) use train::{stream, Stream};
pub use train::{batch_loss_graph, train, BatchInputs, EpochRecord, LossNodes, TrainHistory, TrainOutcome};
