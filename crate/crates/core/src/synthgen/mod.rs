//! Synthetic training data: a foreground image placed by a bounded random
//! projective transform onto a background, with exact ground truth.

mod dataset;
pub mod procedural;

pub use dataset::{
    generate_dataset, sample_id, write_sample, GenOptions, LoadedSample, Manifest, SampleRecord, MANIFEST_NAME,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{avgpool_tensor, ImageRGB, Tensor};
use crate::error::{Error, Result};
use crate::warp::{resize, warp_homography, Homography, UNIT_CORNERS};

/// Rejection attempts of [`sample_transform`] before giving up.
pub const MAX_ATTEMPTS: usize = 100;

/// Slack allowed on the "inside the frame" test, so that a placement
/// filling the whole frame (scale 1) is accepted.
const INSIDE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformBounds {
    /// Foreground side as a fraction of the photo side.
    pub scale_min: f64,
    pub scale_max: f64,
    pub rot_max_deg: f64,
    /// Largest per-corner displacement, as a fraction of the foreground side.
    pub perspective_jitter: f64,
    /// Optional cap on the centre offset per axis, as a fraction of the photo
    /// side. `None` allows any offset that keeps the quad inside.
    pub translate_max: Option<f64>,
}

impl Default for TransformBounds {
    fn default() -> Self {
        Self {
            scale_min: 0.5,
            scale_max: 0.8,
            rot_max_deg: 25.0,
            perspective_jitter: 0.05,
            translate_max: None,
        }
    }
}

impl TransformBounds {
    /// Scale and translation only.
    pub fn similarity(scale_min: f64, scale_max: f64, translate_max: Option<f64>) -> Self {
        Self {
            scale_min,
            scale_max,
            rot_max_deg: 0.0,
            perspective_jitter: 0.0,
            translate_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("transform bounds", msg));
        let vals = [self.scale_min, self.scale_max, self.rot_max_deg, self.perspective_jitter];
        if vals.iter().any(|v| !v.is_finite()) {
            return bad(format!("non-finite bounds {self:?}"));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return bad(format!(
                "need 0 < scale_min <= scale_max <= 1, got {} and {}",
                self.scale_min, self.scale_max
            ));
        }
        if !(0.0..=0.2).contains(&self.perspective_jitter) {
            return bad(format!("perspective jitter {} outside [0, 0.2]", self.perspective_jitter));
        }
        if !(0.0..=180.0).contains(&self.rot_max_deg) {
            return bad(format!("rotation bound {} outside [0, 180]", self.rot_max_deg));
        }
        if let Some(t) = self.translate_max {
            if !(t.is_finite() && t >= 0.0) {
                return bad(format!("translation bound {t} must be non-negative"));
            }
        }
        Ok(())
    }
}

/// A sampled foreground placement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    /// Maps photo coordinates to foreground coordinates (the inverse warp
    /// used to render the photo). Its inverse maps the foreground corners
    /// to `quad`.
    pub homography: Homography,
    /// Foreground corners in the photo, in [`UNIT_CORNERS`] order.
    pub quad: [(f64, f64); 4],
    pub fg_scale: f64,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Strictly convex quad in [`UNIT_CORNERS`] order (a non-self-intersecting
/// quad has consistent turn directions going around it).
fn is_convex(q: &[(f64, f64); 4]) -> bool {
    let ring = [q[0], q[1], q[3], q[2]];
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b, c) = (ring[i], ring[(i + 1) % 4], ring[(i + 2) % 4]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross.abs() < 1e-12 || cross * sign < 0.0 {
            return false;
        }
        sign = cross;
    }
    true
}

/// Draw a placement: scale, rotation, per-corner jitter, then a translation
/// that keeps all four corners inside `[-1, 1]²`.
pub fn sample_transform(seed: u64, bounds: &TransformBounds) -> Result<Placement> {
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = bounds.rot_max_deg.to_radians();
    // Normalized coordinates span 2 units per side.
    let jitter = 2.0 * bounds.perspective_jitter;
    for _ in 0..MAX_ATTEMPTS {
        let s = uniform(&mut rng, bounds.scale_min, bounds.scale_max);
        let theta = uniform(&mut rng, -rot, rot);
        let (sin, cos) = theta.sin_cos();
        let mut quad = UNIT_CORNERS.map(|(x, y)| (s * (cos * x - sin * y), s * (sin * x + cos * y)));
        for c in quad.iter_mut() {
            c.0 += s * uniform(&mut rng, -jitter, jitter);
            c.1 += s * uniform(&mut rng, -jitter, jitter);
        }
        let mut offset = [0.0; 2];
        let mut feasible = true;
        for (axis, o) in offset.iter_mut().enumerate() {
            let coord = |c: &(f64, f64)| if axis == 0 { c.0 } else { c.1 };
            let lo_c = quad.iter().map(coord).fold(f64::INFINITY, f64::min);
            let hi_c = quad.iter().map(coord).fold(f64::NEG_INFINITY, f64::max);
            let (mut lo, mut hi) = (-1.0 - lo_c, 1.0 - hi_c);
            if let Some(t) = bounds.translate_max {
                lo = lo.max(-2.0 * t);
                hi = hi.min(2.0 * t);
            }
            if hi < lo - INSIDE_TOL {
                feasible = false;
                break;
            }
            *o = uniform(&mut rng, lo, hi.max(lo));
        }
        if !feasible {
            continue;
        }
        for c in quad.iter_mut() {
            c.0 += offset[0];
            c.1 += offset[1];
        }
        if !is_convex(&quad) || !quad_inside(&quad) {
            continue;
        }
        let homography = match Homography::from_correspondences(&quad, &UNIT_CORNERS) {
            Ok(h) => h,
            Err(_) => continue,
        };
        return Ok(Placement {
            homography,
            quad,
            fg_scale: s,
        });
    }
    Err(Error::BoundsInfeasible { attempts: MAX_ATTEMPTS })
}

pub(crate) fn quad_inside(q: &[(f64, f64); 4]) -> bool {
    q.iter().all(|&(x, y)| x.abs() <= 1.0 + INSIDE_TOL && y.abs() <= 1.0 + INSIDE_TOL)
}

/// Alpha-over of `fg` warped by `h` onto `bg`: `mask·warped + (1 − mask)·bg`.
/// The output has `bg`'s size.
pub fn composite(fg: &ImageRGB, bg: &ImageRGB, h: &Homography) -> Result<ImageRGB> {
    let (ht, wd) = (bg.height(), bg.width());
    let (warped, mask) = warp_homography(fg.tensor(), h, ht, wd)?;
    let n = ht * wd;
    // `warped` is already multiplied by the coverage.
    let md = mask.data();
    let out = Tensor::from_fn(&[3, ht, wd], |i| {
        warped.data()[i] + (1.0 - md[i % n]) * bg.tensor().data()[i]
    });
    ImageRGB::from_clamped(&out)
}

/// High-resolution target at `scale·size` by bilinear resize, and the
/// target at `size` by average pooling it.
pub fn targets_from(fg: &ImageRGB, size: usize, scale: usize) -> Result<(ImageRGB, ImageRGB)> {
    let hr = resize(fg.tensor(), size * scale, size * scale)?;
    let gt = avgpool_tensor(&hr, scale);
    Ok((ImageRGB::from_clamped(&gt)?, ImageRGB::from_clamped(&hr)?))
}

/// One in-memory training example.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub photo: ImageRGB,
    pub gt: ImageRGB,
    pub gt_hr: ImageRGB,
    pub placement: Placement,
    pub seed: u64,
}

/// Compose a sample from arbitrary-size foreground and background sources.
pub fn synth_sample(
    fg: &ImageRGB,
    bg: &ImageRGB,
    size: usize,
    bounds: &TransformBounds,
    seed: u64,
) -> Result<SynthSample> {
    let (gt, gt_hr) = targets_from(fg, size, 2)?;
    let bg = ImageRGB::from_clamped(&resize(bg.tensor(), size, size)?)?;
    let placement = sample_transform(seed, bounds)?;
    let photo = composite(&gt, &bg, &placement.homography)?;
    Ok(SynthSample {
        photo,
        gt,
        gt_hr,
        placement,
        seed,
    })
}

/// Mean corner distance in pixels between two quads on a `size`×`size`
/// photo (normalized coordinates span `size − 1` pixels over 2 units).
pub fn corner_error_px(a: &[(f64, f64); 4], b: &[(f64, f64); 4], size: usize) -> f64 {
    let px = (size - 1) as f64 / 2.0;
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() * px)
        .sum::<f64>()
        / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_bounds_give_identity() {
        let b = TransformBounds::similarity(1.0, 1.0, None);
        let p = sample_transform(3, &b).unwrap();
        for (a, e) in p.homography.as_array().iter().zip(Homography::IDENTITY.as_array()) {
            assert!((a - e).abs() < 1e-12, "{:?}", p.homography);
        }
    }

    #[test]
    fn placements_are_deterministic_and_inside() {
        let b = TransformBounds::default();
        for seed in 0..200 {
            let p = sample_transform(seed, &b).unwrap();
            assert_eq!(p, sample_transform(seed, &b).unwrap());
            assert!((0.5..=0.8).contains(&p.fg_scale));
            let back = p.homography.inverse().unwrap().corners().unwrap();
            for (c, q) in back.iter().zip(&p.quad) {
                assert!(c.0.abs() < 1.0 && c.1.abs() < 1.0);
                assert!((c.0 - q.0).abs() < 1e-9 && (c.1 - q.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn translation_cap_is_respected() {
        let b = TransformBounds::similarity(0.6, 0.9, Some(0.2));
        for seed in 0..200 {
            let q = sample_transform(seed, &b).unwrap().quad;
            let cx = q.iter().map(|c| c.0).sum::<f64>() / 4.0;
            let cy = q.iter().map(|c| c.1).sum::<f64>() / 4.0;
            assert!(cx.abs() <= 0.4 + 1e-12 && cy.abs() <= 0.4 + 1e-12);
        }
    }

    #[test]
    fn infeasible_bounds_error() {
        let b = TransformBounds {
            translate_max: Some(0.0),
            ..TransformBounds::similarity(1.0, 1.0, None)
        };
        // Scale 1 with zero offset is still feasible.
        assert!(sample_transform(0, &b).is_ok());
        let b = TransformBounds {
            rot_max_deg: 45.0,
            ..TransformBounds::similarity(1.0, 1.0, None)
        };
        assert!(matches!(
            sample_transform(0, &b),
            Err(Error::BoundsInfeasible { attempts: MAX_ATTEMPTS })
        ));
        assert!(TransformBounds::similarity(0.9, 0.5, None).validate().is_err());
    }

    #[test]
    fn composite_identity_and_half_scale() {
        let fg = ImageRGB::filled(9, 9, [0.9, 0.2, 0.1]);
        let bg = ImageRGB::filled(9, 9, [0.1, 0.5, 0.7]);
        let photo = composite(&fg, &bg, &Homography::IDENTITY).unwrap();
        assert_eq!(photo, fg);

        let h = Homography::from_correspondences(&UNIT_CORNERS.map(|(x, y)| (0.5 * x, 0.5 * y)), &UNIT_CORNERS)
            .unwrap();
        let photo = composite(&fg, &bg, &h).unwrap();
        let d = photo.tensor().data();
        for &p in &[0usize, 8, 72, 80] {
            for c in 0..3 {
                assert_eq!(d[c * 81 + p], bg.tensor().data()[c * 81 + p]);
            }
        }
        assert_eq!(d[40], 0.9);
    }

    #[test]
    fn corner_error_is_mean_pixel_distance() {
        let a = UNIT_CORNERS;
        let b = UNIT_CORNERS.map(|(x, y)| (x + 2.0 / 95.0, y));
        assert!((corner_error_px(&a, &b, 96) - 1.0).abs() < 1e-12);
    }
}
