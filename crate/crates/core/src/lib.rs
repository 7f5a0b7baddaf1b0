//! Fundus image primitives: raster I/O, Gaussian/Laplacian pyramids, degradation
//! synthesis for paired training data, and full-reference / overlap / grading metrics.
//!
//! Rasters are stored channel-planar as `Array3<f64>` with shape `(channels, height, width)`.

pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod image_io;
pub mod pyramid;
pub mod seed;
pub mod synthetic;

pub use error::{Error, Result};
pub use image_io::{Image, Mask};
pub use pyramid::LaplacianStack;
