//! Seeded procedural foregrounds and backgrounds, used when no image
//! collection is at hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ImageRGB, Tensor};

/// A light base colour with `disks` hard-edged coloured disks.
pub fn foreground(seed: u64, size: usize, disks: usize) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
    let n = size * size;
    let mut data: Vec<f32> = (0..3 * n).map(|i| base[i / n]).collect();
    let coord = |i: usize| 2.0 * i as f32 / (size - 1) as f32 - 1.0;
    for _ in 0..disks {
        let (cx, cy) = (rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0));
        let r = rng.gen_range(0.1f32..0.4);
        let color: [f32; 3] = std::array::from_fn(|_| rng.gen::<f32>());
        for y in 0..size {
            for x in 0..size {
                let d = ((coord(x) - cx).powi(2) + (coord(y) - cy).powi(2)).sqrt();
                // Edge about one pixel wide at 192 px.
                let a = 1.0 / (1.0 + (-(r - d) * 40.0).exp());
                let p = y * size + x;
                for (c, &col) in color.iter().enumerate() {
                    let v = &mut data[c * n + p];
                    *v = *v * (1.0 - a) + col * a;
                }
            }
        }
    }
    ImageRGB::from_clamped(&Tensor::new(vec![3, size, size], data).expect("3·size² values"))
        .expect("rgb image")
}

/// Dark, smoothly varying noise.
pub fn background(seed: u64, size: usize) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f32> = (0..3 * size * size).map(|_| rng.gen()).collect();
    let smooth = gaussian_blur(&noise, 3, size, size, 3.0);
    let data = smooth
        .iter()
        .map(|&v| (((v - 0.5) * 3.0 + 0.5) * 0.25 + 0.05).clamp(0.0, 1.0))
        .collect();
    ImageRGB::new(Tensor::new(vec![3, size, size], data).expect("3·size² values")).expect("in range")
}

/// Separable Gaussian blur (radius 3σ) with edge replication.
pub fn gaussian_blur(x: &[f32], c: usize, h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma) as isize;
    let kernel: Vec<f32> = (-r..=r).map(|t| (-(t * t) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0; src.len()];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for (k, t) in kernel.iter().zip(-r..=r) {
                        let (sy, sx) = if horizontal {
                            (y, (xx as isize + t).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + t).clamp(0, h as isize - 1) as usize, xx)
                        };
                        acc += k * src[(ci * h + sy) * w + sx];
                    }
                    out[(ci * h + y) * w + xx] = acc;
                }
            }
        }
        out
    };
    pass(&pass(x, true), false)
}
