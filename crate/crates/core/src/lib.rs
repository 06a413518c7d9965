//! Deep photo cropping and enhancement.
//!
//! A photo containing an embedded image passes through one or more
//! spatial-transformer croppers that predict an affine map and resample the
//! embedded image, then through a super-resolution enhancer. Everything is
//! trained end to end on feature-space losses computed by a frozen
//! convolutional feature extractor.

pub mod diffcore;
pub mod error;
pub mod metrics;
pub mod model;
pub mod synthgen;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
