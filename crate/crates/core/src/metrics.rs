//! Image quality metrics (MSE, PSNR, SSIM) and dataset-level reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffcore::{avgpool_tensor, ImageRGB};
use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, a: &ImageRGB, b: &ImageRGB) -> Result<()> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::dims(op, format!("{:?}", a.tensor().dims()), b.tensor().dims()));
    }
    Ok(())
}

/// Mean over pixels and channels of the squared difference.
pub fn mse(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_pair("mse", a, b)?;
    let (x, y) = (a.tensor().data(), b.tensor().data());
    let s: f64 = x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
    Ok(s / x.len() as f64)
}

/// `10·log10(1 / mse)` at peak 1, capped at 100 dB.
pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    (10.0 * (1.0 / mse.max(MSE_FLOOR)).log10()).min(PSNR_CAP_DB)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = g.iter().zip(&x[y * w + xo..]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = g.iter().enumerate().map(|(i, a)| a * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Single-scale SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03,
/// L = 1) over valid windows, averaged per channel and then over channels.
pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dims(
            "ssim",
            format!("image at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            a.tensor().dims(),
        ));
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.tensor().data()[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.tensor().data()[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let sxx = filter_valid(&prod(&x, &x), h, w, &g);
        let syy = filter_valid(&prod(&y, &y), h, w, &g);
        let sxy = filter_valid(&prod(&x, &y), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl SampleMetrics {
    pub fn compute(id: impl Into<String>, output: &ImageRGB, target: &ImageRGB) -> Result<Self> {
        let m = mse(output, target)?;
        Ok(Self {
            id: id.into(),
            psnr_db: psnr_from_mse(m),
            ssim: ssim(output, target)?,
            mse: m,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Side length the metrics were computed at.
    pub resolution: usize,
    pub samples: Vec<SampleMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_mse: f64,
}

impl MetricReport {
    pub fn new(resolution: usize, samples: Vec<SampleMetrics>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Self {
            resolution,
            mean_psnr_db: mean(|s| s.psnr_db),
            mean_ssim: mean(|s| s.ssim),
            mean_mse: mean(|s| s.mse),
            samples,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table: one row per sample and a final row of means.
    pub fn table(&self) -> String {
        let width = self.samples.iter().map(|s| s.id.len()).max().unwrap_or(0).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>7}  {:>8}", "id", "PSNR(dB)", "SSIM", "MSE");
        let mut row = |id: &str, p: f64, s: f64, m: f64| {
            let _ = writeln!(out, "{id:<width$}  {p:>9.3}  {s:>7.4}  {m:>8.5}");
        };
        for s in &self.samples {
            row(&s.id, s.psnr_db, s.ssim, s.mse);
        }
        row("mean", self.mean_psnr_db, self.mean_ssim, self.mean_mse);
        out
    }
}

/// Metrics for each `(id, output, target)` triple, computed in parallel.
pub fn evaluate_pairs(resolution: usize, pairs: &[(String, ImageRGB, ImageRGB)]) -> Result<MetricReport> {
    use rayon::prelude::*;
    let samples = pairs
        .par_iter()
        .map(|(id, out, gt)| SampleMetrics::compute(id.clone(), out, gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(resolution, samples))
}

/// Average-pool an `r·s`-sized image down to `s`, as used for evaluating
/// enhancer outputs at the base resolution.
pub fn downsample(img: &ImageRGB, r: usize) -> Result<ImageRGB> {
    if r == 1 {
        return Ok(img.clone());
    }
    if img.height() % r != 0 || img.width() % r != 0 {
        return Err(Error::dims("downsample", format!("sides divisible by {r}"), img.tensor().dims()));
    }
    ImageRGB::from_clamped(&avgpool_tensor(img.tensor(), r))
}
