//! Surface-to-structure translation.
//!
//! Slices a surface mesh into contour images, translates each image into
//! an internal-structure image with a conditional GAN generator trained
//! against several patch discriminators, stacks the results into a volume
//! and extracts threshold regions as meshes.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
