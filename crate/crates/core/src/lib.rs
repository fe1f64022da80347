//! Unified speech enhancement and separation with gradient modulation.
//!
//! A shared encoder feeds an enhancement mask network whose output drives a
//! separation mask network; a decoder maps masked features back to waveforms.
//! Training combines the two task losses, optionally projecting conflicting
//! enhancement gradients per layer before the update.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradmod;
pub mod harness;
mod linalg;
pub mod losses;
pub mod model;
pub mod params;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
