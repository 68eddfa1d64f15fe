//! Energy-based image inpainting: a two-path CNN energy over (occluded
//! image, restoration) pairs, gradient-descent inference on the restoration
//! and bilevel training through the unrolled descent.

pub mod data;
pub mod energy_net;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod inference;
pub mod kernels;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

/// Double-precision aliases.
pub type Tensor64 = Tensor<f64>;
pub type EnergyNetParams64 = energy_net::EnergyNetParams<f64>;
pub type Checkpoint64 = harness::Checkpoint<f64>;

/// Single-precision aliases.
pub type Tensor32 = Tensor<f32>;
pub type EnergyNetParams32 = energy_net::EnergyNetParams<f32>;
pub type Checkpoint32 = harness::Checkpoint<f32>;
