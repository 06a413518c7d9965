use super::affine::SampleGrid;
use crate::diffcore::{BackwardOp, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Pixel coordinate of normalized `v` along an axis of `n` pixels.
///
/// Values within a few ulps of a pixel center snap onto it, so grids that
/// land on pixel centers in exact arithmetic sample those pixels exactly.
pub(crate) fn to_pixel<T: Scalar>(v: T, n: usize) -> T {
    let half = T::from_usize(n - 1).unwrap() * T::lit(0.5);
    let p = (v + T::one()) * half;
    let r = p.round();
    let tol = T::epsilon() * T::lit(16.0) * T::from_usize(n.max(2)).unwrap();
    if (p - r).abs() <= tol {
        r
    } else {
        p
    }
}

/// Bilinear footprint of one sample point: up to four in-range taps.
pub(crate) struct Taps<T> {
    pub idx: [usize; 4],
    pub wt: [T; 4],
    pub valid: [bool; 4],
    /// Fractional offsets inside the floor cell.
    pub fx: T,
    pub fy: T,
}

pub(crate) fn taps<T: Scalar>(xp: T, yp: T, h: usize, w: usize) -> Taps<T> {
    let (xf, yf) = (xp.floor(), yp.floor());
    let (fx, fy) = (xp - xf, yp - yf);
    let x0 = xf.to_isize().unwrap_or(isize::MIN / 2);
    let y0 = yf.to_isize().unwrap_or(isize::MIN / 2);
    let one = T::one();
    let wt = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
    let mut idx = [0; 4];
    let mut valid = [false; 4];
    for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let (x, y) = (x0.saturating_add(dx), y0.saturating_add(dy));
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            valid[k] = true;
            idx[k] = y as usize * w + x as usize;
        }
    }
    Taps {
        idx,
        wt,
        valid,
        fx,
        fy,
    }
}

fn sample_tensor<T: Scalar>(src: &Tensor<T>, grid: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (src.dims()[0], src.dims()[1], src.dims()[2]);
    let (ho, wo) = (grid.dims()[1], grid.dims()[2]);
    let n = ho * wo;
    let (gx, gy) = grid.data().split_at(n);
    let sd = src.data();
    let mut out = vec![T::zero(); c * n];
    for p in 0..n {
        let t = taps(to_pixel(gx[p], w), to_pixel(gy[p], h), h, w);
        for ch in 0..c {
            let plane = &sd[ch * h * w..(ch + 1) * h * w];
            let mut v = T::zero();
            for k in 0..4 {
                if t.valid[k] {
                    v += t.wt[k] * plane[t.idx[k]];
                }
            }
            out[ch * n + p] = v;
        }
    }
    Tensor::new(vec![c, ho, wo], out).unwrap()
}

fn check_src<T: Scalar>(src: &Tensor<T>) -> Result<()> {
    let (_, h, w) = src.chw("grid_sample")?;
    if h < 2 || w < 2 {
        return Err(Error::dims("grid_sample", "source at least 2x2", src.dims()));
    }
    Ok(())
}

/// Bilinear resampling of `src: [C, H, W]` at `grid`, zero outside the
/// pixel lattice.
pub fn grid_sample<T: Scalar>(src: &Tensor<T>, grid: &SampleGrid<T>) -> Result<Tensor<T>> {
    check_src(src)?;
    Ok(sample_tensor(src, grid.coords()))
}

struct GridSampleOp;

impl<T: Scalar> BackwardOp<T> for GridSampleOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (src, grid) = (x[0], x[1]);
        let (c, h, w) = (src.dims()[0], src.dims()[1], src.dims()[2]);
        let n = grid.dims()[1] * grid.dims()[2];
        let (gx, gy) = grid.data().split_at(n);
        let gd = g.data();
        let sd = src.data();
        let half_w = T::from_usize(w - 1).unwrap() * T::lit(0.5);
        let half_h = T::from_usize(h - 1).unwrap() * T::lit(0.5);

        let mut dsrc = needs[0].then(|| Tensor::zeros_like(src));
        let mut dgrid = needs[1].then(|| Tensor::zeros_like(grid));
        for p in 0..n {
            let t = taps(to_pixel(gx[p], w), to_pixel(gy[p], h), h, w);
            if let Some(ds) = dsrc.as_mut() {
                let ds = ds.data_mut();
                for ch in 0..c {
                    let go = gd[ch * n + p];
                    for k in 0..4 {
                        if t.valid[k] {
                            ds[ch * h * w + t.idx[k]] += t.wt[k] * go;
                        }
                    }
                }
            }
            if let Some(dg) = dgrid.as_mut() {
                // d out / d xp = (1-fy)(v01 - v00) + fy(v11 - v10), likewise for y;
                // out-of-range taps read as zero.
                let one = T::one();
                let (mut ddx, mut ddy) = (T::zero(), T::zero());
                for ch in 0..c {
                    let plane = &sd[ch * h * w..(ch + 1) * h * w];
                    let v = |k: usize| if t.valid[k] { plane[t.idx[k]] } else { T::zero() };
                    let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
                    let go = gd[ch * n + p];
                    ddx += go * ((one - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                    ddy += go * ((one - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                }
                let dg = dg.data_mut();
                dg[p] = ddx * half_w;
                dg[n + p] = ddy * half_h;
            }
        }
        vec![dsrc, dgrid]
    }
}

/// Top-left offset of a centered `h_out × w_out` window in `h × w`.
pub fn center_offset(h: usize, w: usize, h_out: usize, w_out: usize) -> (usize, usize) {
    ((h - h_out) / 2, (w - w_out) / 2)
}

struct CenterCropOp {
    top: usize,
    left: usize,
}

impl<T: Scalar> BackwardOp<T> for CenterCropOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, h, w) = (x[0].dims()[0], x[0].dims()[1], x[0].dims()[2]);
        let (ho, wo) = (g.dims()[1], g.dims()[2]);
        let mut dx = Tensor::zeros_like(x[0]);
        let d = dx.data_mut();
        for ch in 0..c {
            for r in 0..ho {
                let dst = (ch * h + r + self.top) * w + self.left;
                d[dst..dst + wo].copy_from_slice(&g.data()[(ch * ho + r) * wo..][..wo]);
            }
        }
        vec![Some(dx)]
    }
}

fn crop_window<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, ho: usize, wo: usize) -> Tensor<T> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for r in 0..ho {
            let s = (ch * h + r + top) * w + left;
            out.extend_from_slice(&x.data()[s..s + wo]);
        }
    }
    Tensor::new(vec![c, ho, wo], out).unwrap()
}

fn check_crop(dims: &[usize], h_out: usize, w_out: usize) -> Result<()> {
    if h_out == 0 || w_out == 0 || h_out > dims[1] || w_out > dims[2] {
        return Err(Error::dims(
            "center_crop",
            format!("source at least {h_out}x{w_out}"),
            dims,
        ));
    }
    Ok(())
}

/// Centered `h_out × w_out` window of `src: [C, H, W]`.
pub fn center_crop<T: Scalar>(src: &Tensor<T>, h_out: usize, w_out: usize) -> Result<Tensor<T>> {
    let (_, h, w) = src.chw("center_crop")?;
    check_crop(src.dims(), h_out, w_out)?;
    let (top, left) = center_offset(h, w, h_out, w_out);
    Ok(crop_window(src, top, left, h_out, w_out))
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Differentiable bilinear sampling of `self: [C, H, W]` at `grid: [2, h, w]`.
    pub fn grid_sample(self, grid: Var<'t, T>) -> Result<Var<'t, T>> {
        let (src, g) = (self.value(), grid.value());
        check_src(&src)?;
        if g.rank() != 3 || g.dims()[0] != 2 {
            return Err(Error::dims("grid_sample", "grid [2, H, W]", g.dims()));
        }
        let out = sample_tensor(&src, &g);
        Ok(self.tape().record(&[self, grid], out, GridSampleOp))
    }

    pub fn center_crop(self, h_out: usize, w_out: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (_, h, w) = x.chw("center_crop")?;
        check_crop(x.dims(), h_out, w_out)?;
        let (top, left) = center_offset(h, w, h_out, w_out);
        let out = crop_window(&x, top, left, h_out, w_out);
        Ok(self.tape().record(&[self], out, CenterCropOp { top, left }))
    }
}
