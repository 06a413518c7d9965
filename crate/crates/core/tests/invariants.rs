use dce_core::diffcore::{ImageRGB, Tensor};
use dce_core::metrics::{mse, psnr, ssim};
use dce_core::synthgen::{sample_transform, TransformBounds};
use dce_core::warp::{affine_grid, compose_affine, grid_sample, resize, AffineParams, Homography};
use proptest::prelude::*;

fn image(seed: u64, size: usize) -> ImageRGB {
    ImageRGB::new(Tensor::from_fn(&[3, size, size], |i| {
        (((i as u64).wrapping_mul(2654435761).wrapping_add(seed * 97)) % 1000) as f32 / 999.0
    }))
    .unwrap()
}

fn affine() -> impl Strategy<Value = AffineParams> {
    (0.5f64..1.5, -0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5, 0.5f64..1.5, -0.5f64..0.5)
        .prop_map(|(a, b, c, d, e, f)| AffineParams([a, b, c, d, e, f]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compose_matches_sequential_application(a in affine(), b in affine(), x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let ab = compose_affine(&a, &b);
        let (bx, by) = b.apply(x, y);
        let (ex, ey) = a.apply(bx, by);
        let (gx, gy) = ab.apply(x, y);
        prop_assert!((ex - gx).abs() < 1e-12 && (ey - gy).abs() < 1e-12);
    }

    #[test]
    fn homography_inverse_round_trips(a in affine(), p in -0.1f64..0.1, q in -0.1f64..0.1, x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let m = a.to_matrix();
        let h = Homography::new([m[0], m[1], m[2], m[3], m[4], m[5], p, q, 1.0]).unwrap();
        let inv = h.inverse().unwrap();
        let (u, v) = h.apply(x, y).unwrap();
        let (bx, by) = inv.apply(u, v).unwrap();
        prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
        let (a, b) = (image(s1, 16), image(s2, 16));
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0);
        prop_assert!(psnr(&a, &b).unwrap() <= 100.0);
    }

    #[test]
    fn sampled_placements_respect_bounds(seed in any::<u64>()) {
        let bounds = TransformBounds::default();
        let p = sample_transform(seed, &bounds).unwrap();
        prop_assert!(p.fg_scale >= bounds.scale_min - 1e-12 && p.fg_scale <= bounds.scale_max + 1e-12);
        prop_assert!(p.homography.det().abs() > 0.0);
        let inv = p.homography.inverse().unwrap();
        for (x, y) in inv.corners().unwrap() {
            prop_assert!(x.abs() <= 1.0 + 1e-9 && y.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn identity_grid_reproduces_input(seed in 0u64..1000, h in 2usize..12, w in 2usize..12) {
        let src = Tensor::<f32>::from_fn(&[2, h, w], |i| ((i as u64 * 31 + seed) % 17) as f32);
        let grid = affine_grid::<f32>(&AffineParams::identity(), h, w).unwrap();
        prop_assert!(grid_sample(&src, &grid).unwrap() == src);
    }

    #[test]
    fn resize_preserves_constant_images(v in 0.0f32..1.0, h in 2usize..20, w in 2usize..20) {
        let src = Tensor::full(&[3, 7, 9], v);
        let out = resize(&src, h, w).unwrap();
        prop_assert!(out.data().iter().all(|&o| (o - v).abs() < 1e-6));
    }
}
