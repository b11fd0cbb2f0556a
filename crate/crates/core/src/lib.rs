//! Unsupervised domain adaptation by minimizing MC-dropout model uncertainty.
//!
//! A feature extractor `F` and classifier `C` are pretrained on labeled
//! source data, then adapted by alternating a classifier update on the
//! source cross-entropy with a feature update that also minimizes the
//! predictive variance of `M` dropout passes over unlabeled target data.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dumps;
pub mod error;
pub mod experiment;
pub mod ndcore;
pub mod nets;
pub mod optim;
pub mod selftest;
pub mod trainer;
pub mod uncertainty;

pub use error::{MudaError, Result};
pub use nets::{Network, NetworkSpec, ParamScope};
pub use trainer::{TrainConfig, Trainer};
pub use uncertainty::{DivergenceNorm, McEnsemble};
