//! Weight-regularization continual learning on a from-scratch MLP.
//!
//! The crate implements five importance estimators (EWC, online EWC, SI, MAS
//! and logits-reversal EWC, here `EwcDr`), the quadratic consolidation
//! penalty they feed, a deterministic SGD trainer for class-incremental task
//! streams, the usual accuracy metrics, and diagnostics that expose EWC's
//! vanishing importance on confident samples and MAS's protection of large
//! negative logits.
//!
//! Per-sample work (batch gradients, importance estimation, evaluation) runs
//! on rayon when the default `parallel` feature is enabled. Reductions use a
//! fixed chunked order, so results are bit-identical with and without it.

pub mod analysis;
pub mod error;
pub mod gradcheck;
pub mod importance;
pub mod io;
pub mod metrics;
pub mod network;
pub mod par;
pub mod params;
pub mod regularizer;
pub mod scenario;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use importance::{ImportanceMap, Method};
pub use network::Network;
pub use par::Execution;
pub use params::{GradientSet, ParamSet};
pub use scenario::{LabeledDataset, Sample, TaskStream};
pub use tensor::{Tensor1, Tensor2};
pub use trainer::TrainConfig;
