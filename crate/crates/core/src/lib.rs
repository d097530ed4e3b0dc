//! Pulmonary embolism detection on CT angiography volumes: multi-scale
//! anchor-cube proposals from a 3-D encoder-decoder network, vessel-aligned
//! resampling of each candidate, and a small classifier that removes false
//! positives. Includes a synthetic phantom generator and FROC scoring.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod config;
pub mod error;
pub mod froc;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod proposal;
pub mod verify;
pub mod volume;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use nn::{Scalar, Tensor};
pub use proposal::{BoxCube, Candidate};
pub use volume::{Volume, WorldPoint};
