//! Spatial-transformer machinery: affine sampling grids, differentiable
//! bilinear sampling, and projective warping for data generation.
//!
//! All coordinates are normalized with the align-corners convention: `-1`
//! and `+1` are the centers of the first and last pixel along an axis.
//! Transforms map output coordinates to source coordinates.

mod affine;
mod homography;
mod sample;

pub use affine::{affine_grid, compose_affine, normalized, AffineParams, SampleGrid};
pub use homography::{warp_homography, Homography, MIN_DENOMINATOR, MIN_DET, UNIT_CORNERS};
pub use sample::{center_crop, center_offset, grid_sample};

use crate::diffcore::{Scalar, Tensor};
use crate::error::Result;

/// Bilinear resize of `src: [C, H, W]` to `h_out × w_out` (a pure scaling
/// warp under the align-corners convention).
pub fn resize<T: Scalar>(src: &Tensor<T>, h_out: usize, w_out: usize) -> Result<Tensor<T>> {
    let (_, h, w) = src.chw("resize")?;
    if (h, w) == (h_out, w_out) {
        return Ok(src.clone());
    }
    let grid = affine_grid(&AffineParams::identity(), h_out, w_out)?;
    grid_sample(src, &grid)
}
