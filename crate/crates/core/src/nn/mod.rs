//! Tensor kernels, layers and training utilities.

pub mod augment;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod net;
pub mod ohem;
pub mod pool;
pub mod sgd;
pub mod tensor;

pub use tensor::{Scalar, Tensor};
