//! Adversarial deformable registration of multimodal images.
//!
//! The crate covers the whole experiment: image and field primitives,
//! deformation simulation, evaluation metrics, differentiable losses, a small
//! autodiff core with the generator/discriminator networks, the training
//! recipe, synthetic vessel phantoms, an iterative NMI/B-spline baseline and
//! the evaluation harness.

pub mod baseline;
pub mod bspline;
pub mod deformation;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod seeds;
pub mod synthdata;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use imaging::{BorderPolicy, DeformationField, Image};
pub use metrics::Mask;
