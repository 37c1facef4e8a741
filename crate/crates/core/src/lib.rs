//! Numerical core: tensors, layers with analytic gradients, the
//! deformable-attentive enhancement block, the referring-aware fusion loss,
//! a finite-difference oracle, segmentation metrics, a synthetic referring
//! dataset and a small training harness.

pub mod bench;
pub mod data;
pub mod enhance;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Tensor};
