//! Compressed sensing recovery with proximal averaging.
//!
//! The crate provides the classical proximal-averaged iterative shrinkage
//! solvers over a convolutional analysis transform, their unfolded trainable
//! networks (plain and residual form), K-bit weight quantization with
//! quantization-aware training, and the metrics and file formats around them.

pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod metrics;
pub mod network;
pub mod penalties;
pub mod pgm;
pub mod quantize;
pub mod sensing;
pub mod solver;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use penalties::{MixtureWeights, PenaltyKind, PenaltySpec};
pub use sensing::{make_sensing, SensingOperator};
pub use tensor::{BankRole, FilterBank, Tensor};
pub use network::{ModelConfig, NetworkModel, Variant};
pub use train::{train, TrainConfig};
