//! Few-view CT reconstruction with a learned, point-wise back-projection
//! layer followed by a U-net refinement stage.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod data;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod projector;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{Image, Sinogram};
