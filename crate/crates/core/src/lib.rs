//! Model soups, output ensembles and the random-network bounds behind them,
//! on small synthetic image-classification tasks.

pub mod bounds;
pub mod checkpoint;
pub mod error;
pub mod merge;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use merge::{MergeMethod, ModelPool};
pub use model::{Activation, Layer, Model, ModelMeta};
pub use synth::{DatasetSpec, LabeledSet, SyntheticData};
pub use tensor::{RngStream, Tensor};
pub use train::{TrainConfig, TrainLog};
