use crate::diffcore::{BackwardOp, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Row-major 2×3 affine map from normalized output coordinates to
/// normalized source coordinates: `[a11, a12, a13, a21, a22, a23]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams(pub [f64; 6]);

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn new(a: [f64; 6]) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("affine", format!("non-finite parameters {a:?}")));
        }
        Ok(Self(a))
    }

    pub fn from_slice<T: Scalar>(a: &[T]) -> Result<Self> {
        if a.len() != 6 {
            return Err(Error::dims("affine", "6 parameters", &[a.len()]));
        }
        let mut out = [0.0; 6];
        for (o, v) in out.iter_mut().zip(a) {
            *o = v.to_f64().unwrap_or(f64::NAN);
        }
        Self::new(out)
    }

    pub fn scale(s: f64) -> Self {
        Self([s, 0.0, 0.0, 0.0, s, 0.0])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    /// Rotation by `theta` radians and isotropic scale about the origin, then translation.
    pub fn similarity(scale: f64, theta: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self([scale * c, -scale * s, tx, scale * s, scale * c, ty])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let a = &self.0;
        (a[0] * x + a[1] * y + a[2], a[3] * x + a[4] * y + a[5])
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[6], |i| T::lit(self.0[i]))
    }

    /// 3×3 homogeneous extension, row-major.
    pub fn to_matrix(&self) -> [f64; 9] {
        let a = &self.0;
        [a[0], a[1], a[2], a[3], a[4], a[5], 0.0, 0.0, 1.0]
    }
}

/// Parameters equivalent to resampling with `outer` and then resampling the
/// result with `inner`: the product `outer · inner` of the homogeneous
/// extensions.
pub fn compose_affine(outer: &AffineParams, inner: &AffineParams) -> AffineParams {
    let (a, b) = (&outer.0, &inner.0);
    AffineParams([
        a[0] * b[0] + a[1] * b[3],
        a[0] * b[1] + a[1] * b[4],
        a[0] * b[2] + a[1] * b[5] + a[2],
        a[3] * b[0] + a[4] * b[3],
        a[3] * b[1] + a[4] * b[4],
        a[3] * b[2] + a[4] * b[5] + a[5],
    ])
}

/// Normalized coordinate of pixel center `i` of `n` (align-corners:
/// `-1` at index 0, `+1` at index `n - 1`).
pub fn normalized<T: Scalar>(i: usize, n: usize) -> T {
    T::from_usize(2 * i).unwrap() / T::from_usize(n - 1).unwrap() - T::one()
}

/// Per-output-pixel normalized source coordinates.
///
/// Stored planar as `[2, height, width]`: plane 0 holds x, plane 1 holds y.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid<T: Scalar = f32> {
    coords: Tensor<T>,
}

impl<T: Scalar> SampleGrid<T> {
    pub fn new(coords: Tensor<T>) -> Result<Self> {
        match coords.dims() {
            &[2, _, _] => Ok(Self { coords }),
            d => Err(Error::dims("sample_grid", "[2, H, W]", d)),
        }
    }

    pub fn height(&self) -> usize {
        self.coords.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.coords.dims()[2]
    }

    pub fn coords(&self) -> &Tensor<T> {
        &self.coords
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.coords
    }

    pub fn x(&self, row: usize, col: usize) -> T {
        self.coords.data()[row * self.width() + col]
    }

    pub fn y(&self, row: usize, col: usize) -> T {
        let hw = self.height() * self.width();
        self.coords.data()[hw + row * self.width() + col]
    }
}

fn check_grid_size(h_out: usize, w_out: usize) -> Result<()> {
    if h_out < 2 || w_out < 2 {
        return Err(Error::invalid(
            "affine_grid",
            format!("output size {h_out}x{w_out}, need at least 2x2"),
        ));
    }
    Ok(())
}

fn grid_tensor<T: Scalar>(a: &[T], h_out: usize, w_out: usize) -> Tensor<T> {
    let hw = h_out * w_out;
    let mut data = vec![T::zero(); 2 * hw];
    for r in 0..h_out {
        let yt: T = normalized(r, h_out);
        for c in 0..w_out {
            let xt: T = normalized(c, w_out);
            data[r * w_out + c] = a[0] * xt + a[1] * yt + a[2];
            data[hw + r * w_out + c] = a[3] * xt + a[4] * yt + a[5];
        }
    }
    Tensor::new(vec![2, h_out, w_out], data).unwrap()
}

/// Sampling grid of `a` for an `h_out × w_out` output.
pub fn affine_grid<T: Scalar>(a: &AffineParams, h_out: usize, w_out: usize) -> Result<SampleGrid<T>> {
    check_grid_size(h_out, w_out)?;
    let params = a.to_tensor::<T>();
    SampleGrid::new(grid_tensor(params.data(), h_out, w_out))
}

struct AffineGridOp;

impl<T: Scalar> BackwardOp<T> for AffineGridOp {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (h, w) = (out.dims()[1], out.dims()[2]);
        let hw = h * w;
        let gd = g.data();
        let mut da = [T::zero(); 6];
        for r in 0..h {
            let yt: T = normalized(r, h);
            for c in 0..w {
                let xt: T = normalized(c, w);
                let (gx, gy) = (gd[r * w + c], gd[hw + r * w + c]);
                da[0] += gx * xt;
                da[1] += gx * yt;
                da[2] += gx;
                da[3] += gy * xt;
                da[4] += gy * yt;
                da[5] += gy;
            }
        }
        vec![Some(Tensor::new(vec![6], da.to_vec()).unwrap())]
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Differentiable [`affine_grid`]: `self` holds the 6 affine parameters;
    /// the result is a `[2, h_out, w_out]` grid.
    pub fn affine_grid(self, h_out: usize, w_out: usize) -> Result<Var<'t, T>> {
        check_grid_size(h_out, w_out)?;
        let a = self.value();
        if a.numel() != 6 {
            return Err(Error::dims("affine_grid", "6 parameters", a.dims()));
        }
        let out = grid_tensor(a.data(), h_out, w_out);
        Ok(self.tape().record(&[self], out, AffineGridOp))
    }
}
