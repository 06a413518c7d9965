use super::affine::{normalized, AffineParams};
use super::sample::{taps, to_pixel};
use crate::diffcore::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Smallest |det| accepted for an invertible homography.
pub const MIN_DET: f64 = 1e-9;
/// Smallest |w| accepted in the perspective divide of [`warp_homography`].
pub const MIN_DENOMINATOR: f64 = 1e-6;

/// Row-major 3×3 projective map on homogeneous normalized coordinates,
/// scaled so that `h[8] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub(crate) [f64; 9]);

fn det3(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn new(h: [f64; 9]) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular(format!("non-finite homography {h:?}")));
        }
        if h[8].abs() < 1e-12 {
            return Err(Error::Singular("homography with h[8] == 0 cannot be normalized".into()));
        }
        let s = 1.0 / h[8];
        let h = h.map(|v| v * s);
        let det = det3(&h);
        if det.abs() <= MIN_DET {
            return Err(Error::Singular(format!("homography determinant {det:e}")));
        }
        Ok(Self(h))
    }

    pub fn from_affine(a: &AffineParams) -> Result<Self> {
        Self::new(a.to_matrix())
    }

    pub fn as_array(&self) -> &[f64; 9] {
        &self.0
    }

    pub fn det(&self) -> f64 {
        det3(&self.0)
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.0;
        let det = det3(m);
        if det.abs() <= MIN_DET {
            return Err(Error::Singular(format!("homography determinant {det:e}")));
        }
        let adj = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        Self::new(adj.map(|v| v / det))
    }

    /// `self · other`
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        let (a, b) = (&self.0, &other.0);
        let mut m = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
            }
        }
        Self::new(m)
    }

    /// Homogeneous image of `(x, y)`: `(x', y', w)`.
    pub fn apply_homogeneous(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let h = &self.0;
        (
            h[0] * x + h[1] * y + h[2],
            h[3] * x + h[4] * y + h[5],
            h[6] * x + h[7] * y + h[8],
        )
    }

    /// Image of `(x, y)` after the perspective divide; `None` when `|w|` is
    /// below [`MIN_DENOMINATOR`].
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (u, v, w) = self.apply_homogeneous(x, y);
        (w.abs() >= MIN_DENOMINATOR).then(|| (u / w, v / w))
    }

    /// Exact homography taking each `src[i]` to `dst[i]` (direct linear
    /// transform on four correspondences with `h[8]` fixed to 1).
    pub fn from_correspondences(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self> {
        let mut a = [[0.0f64; 9]; 8];
        for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        let sol = solve8(a).ok_or_else(|| {
            Error::Singular(format!("degenerate correspondences {src:?} -> {dst:?}"))
        })?;
        Self::new([sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0])
    }

    /// The four corners of the normalized square `[-1, 1]²` mapped through `self`,
    /// in the order (-1,-1), (1,-1), (-1,1), (1,1).
    pub fn corners(&self) -> Option<[(f64, f64); 4]> {
        let mut out = [(0.0, 0.0); 4];
        for (o, &(x, y)) in out.iter_mut().zip(UNIT_CORNERS.iter()) {
            *o = self.apply(x, y)?;
        }
        Some(out)
    }
}

/// Corners of the normalized square, in the order used by [`Homography::corners`].
pub const UNIT_CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];

/// Gaussian elimination with partial pivoting on an 8×9 augmented system.
fn solve8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut x = [0.0; 8];
    for i in 0..8 {
        x[i] = a[i][8] / a[i][i];
    }
    Some(x)
}

/// Inverse warp of `src: [C, H, W]` through `h`: output pixel `p` (in
/// normalized coordinates) samples `src` at `h(p)` bilinearly, with zero
/// outside the pixel lattice.
///
/// Returns the (coverage-premultiplied) warped image and a `[1, h_out, w_out]`
/// coverage mask holding the in-range bilinear mass of each sample.
pub fn warp_homography<T: Scalar>(
    src: &Tensor<T>,
    h: &Homography,
    h_out: usize,
    w_out: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, sh, sw) = src.chw("warp_homography")?;
    if sh < 2 || sw < 2 || h_out < 2 || w_out < 2 {
        return Err(Error::invalid(
            "warp_homography",
            format!("source {sh}x{sw} and output {h_out}x{w_out} must be at least 2x2"),
        ));
    }
    let n = h_out * w_out;
    let sd = src.data();
    let mut out = vec![T::zero(); c * n];
    let mut mask = vec![T::zero(); n];
    for row in 0..h_out {
        let yt: f64 = normalized(row, h_out);
        for col in 0..w_out {
            let xt: f64 = normalized(col, w_out);
            let (u, v, w) = h.apply_homogeneous(xt, yt);
            if w.abs() < MIN_DENOMINATOR {
                return Err(Error::DegenerateTransform {
                    denominator: w,
                    row,
                    col,
                });
            }
            let (xs, ys) = if w == 1.0 { (u, v) } else { (u / w, v / w) };
            let xp: T = to_pixel(T::lit(xs), sw);
            let yp: T = to_pixel(T::lit(ys), sh);
            let t = taps(xp, yp, sh, sw);
            let p = row * w_out + col;
            // Full coverage is exactly 1 so that interior pixels of a
            // composite take no background at all.
            let m = if t.valid.iter().all(|&v| v) {
                T::one()
            } else {
                (0..4).filter(|&k| t.valid[k]).map(|k| t.wt[k]).sum()
            };
            mask[p] = m;
            for ch in 0..c {
                let plane = &sd[ch * sh * sw..(ch + 1) * sh * sw];
                let mut acc = T::zero();
                for k in 0..4 {
                    if t.valid[k] {
                        acc += t.wt[k] * plane[t.idx[k]];
                    }
                }
                out[ch * n + p] = acc;
            }
        }
    }
    Ok((
        Tensor::new(vec![c, h_out, w_out], out)?,
        Tensor::new(vec![1, h_out, w_out], mask)?,
    ))
}
