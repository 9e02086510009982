//! Completion of incomplete user × service × time QoS tensors with an
//! extended CP tensor network.
//!
//! The model expands the user and service factor vectors of every CP rank
//! component into `M`-column slabs, so component `r` contributes
//! `(A_r B_r^T) ∘ c_r`, and adds per-user, per-service and per-time biases.
//! Training uses nonnegative multiplicative updates over the observed entries
//! only.
//!
//! - [`tensor`]: coordinate storage with per-mode slice indexes
//! - [`model`]: parameters and prediction
//! - [`solver`]: objective and training loop
//! - [`data`]: log I/O, synthetic data, splits
//! - [`eval`]: RMSE/MAE and Friedman mean ranks

pub mod data;
pub mod eval;
pub mod model;
pub mod solver;
pub mod tensor;

pub use data::{DatasetSplit, SyntheticSpec};
pub use eval::{Metrics, ResultTable};
pub use model::{EctnModel, ModelConfig, ParamHandle};
pub use solver::{TrainConfig, TrainReport, TrainingSet};
pub use tensor::{Dims, Entry, Mode, ObservedTensor};
