//! Differentiable operations recorded on a [`Tape`](super::Tape).

use super::tape::{BackwardOp, Var};
use super::tensor::{MatMut, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Spatial padding of [`Var::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output keeps the input size at stride 1. Even kernels put the extra
    /// row/column of zeros on the bottom/right.
    Same,
}

impl Padding {
    /// (top, left, bottom, right)
    fn amounts(self, kh: usize, kw: usize) -> (usize, usize, usize, usize) {
        match self {
            Padding::Valid => (0, 0, 0, 0),
            Padding::Same => {
                let (th, tw) = (kh - 1, kw - 1);
                (th / 2, tw / 2, th - th / 2, tw - tw / 2)
            }
        }
    }
}

fn same_dims(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dims(op, format!("{:?}", a.dims()), b.dims()));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.dims().to_vec(), data).expect("same dims")
}

// ---------------------------------------------------------------- elementwise

struct AddOp;
impl<T: Scalar> BackwardOp<T> for AddOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct SubOp;
impl<T: Scalar> BackwardOp<T> for SubOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![
            Some(g.clone()),
            needs[1].then(|| g.map(|v| -v)),
        ]
    }
}

struct MulOp;
impl<T: Scalar> BackwardOp<T> for MulOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| zip_map(g, x[1], |g, b| g * b)),
            needs[1].then(|| zip_map(g, x[0], |g, a| g * a)),
        ]
    }
}

struct ScaleOp<T>(T);
impl<T: Scalar> BackwardOp<T> for ScaleOp<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = self.0;
        vec![Some(g.map(|v| v * c))]
    }
}

struct SumOp {
    mean: bool,
}
impl<T: Scalar> BackwardOp<T> for SumOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut v = g.data()[0];
        if self.mean {
            v = v / T::from_usize(x[0].numel()).unwrap();
        }
        vec![Some(Tensor::full(x[0].dims(), v))]
    }
}

struct ReshapeOp;
impl<T: Scalar> BackwardOp<T> for ReshapeOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(x[0].dims()).expect("same numel"))]
    }
}

struct ReluOp;
impl<T: Scalar> BackwardOp<T> for ReluOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(zip_map(g, x[0], |g, x| if x > T::zero() { g } else { T::zero() }))]
    }
}

struct ChannelAffineOp<T> {
    scale: Vec<T>,
}
impl<T: Scalar> BackwardOp<T> for ChannelAffineOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let plane = x[0].numel() / self.scale.len();
        let gd = g.data();
        let dx = Tensor::from_fn(x[0].dims(), |i| gd[i] * self.scale[i / plane]);
        vec![Some(dx)]
    }
}

// --------------------------------------------------------------------- linear

struct LinearOp;
impl<T: Scalar> BackwardOp<T> for LinearOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (input, weight) = (x[0], x[1]);
        let (m, n) = (weight.dims()[0], weight.dims()[1]);
        let dx = needs[0].then(|| {
            let mut out = vec![T::zero(); n];
            T::gemm(1, m, n, g.data(), false, weight.data(), false, &mut out, false);
            Tensor::new(vec![n], out).unwrap()
        });
        let dw = needs[1].then(|| {
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, 1, n, g.data(), false, input.data(), false, &mut out, false);
            Tensor::new(vec![m, n], out).unwrap()
        });
        let db = needs[2].then(|| g.clone());
        vec![dx, dw, db]
    }
}

// ---------------------------------------------------------------- convolution

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1, stride 1, no padding: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    // Stride-1 convolutions run as one matrix product per kernel tap over a
    // zero-padded copy of the input. Each output row is computed `wp` wide;
    // the trailing `kw - 1` columns wrap into the next row and are dropped.

    fn is_shifted(&self) -> bool {
        // Each tap rewrites the whole output, so this only pays off when the
        // output has no more channels than the input.
        self.stride == 1 && !self.is_pointwise() && self.c_out <= self.c_in
    }

    fn wp(&self) -> usize {
        self.w_out + self.kw - 1
    }

    /// Per-channel length of the padded input, with slack for the last tap.
    fn plane(&self) -> usize {
        (self.h_out + self.kh - 1) * self.wp() + self.kw - 1
    }

    fn wide(&self) -> usize {
        self.h_out * self.wp()
    }

    fn pad<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (wp, plane) = (self.wp(), self.plane());
        let mut out = vec![T::zero(); self.c_in * plane];
        for ci in 0..self.c_in {
            for ih in 0..self.h {
                let dst = ci * plane + (ih + self.pad_top) * wp + self.pad_left;
                out[dst..dst + self.w].copy_from_slice(&x[(ci * self.h + ih) * self.w..][..self.w]);
            }
        }
        out
    }

    fn unpad<T: Scalar>(&self, xp: &[T]) -> Vec<T> {
        let (wp, plane) = (self.wp(), self.plane());
        let mut out = Vec::with_capacity(self.c_in * self.h * self.w);
        for ci in 0..self.c_in {
            for ih in 0..self.h {
                let src = ci * plane + (ih + self.pad_top) * wp + self.pad_left;
                out.extend_from_slice(&xp[src..src + self.w]);
            }
        }
        out
    }

    fn narrow<T: Scalar>(&self, wide: &[T], c: usize) -> Vec<T> {
        let wp = self.wp();
        let mut out = Vec::with_capacity(c * self.p());
        for row in wide.chunks(wp).take(c * self.h_out) {
            out.extend_from_slice(&row[..self.w_out]);
        }
        out
    }

    fn widen<T: Scalar>(&self, g: &[T], c: usize) -> Vec<T> {
        let wp = self.wp();
        let mut out = vec![T::zero(); c * self.wide()];
        for (dst, src) in out.chunks_mut(wp).zip(g.chunks(self.w_out)) {
            dst[..self.w_out].copy_from_slice(src);
        }
        out
    }

    /// Weights of tap `(ki, kj)` as a `c_out×c_in` view (or its transpose).
    fn tap<'a, T>(&self, w: &'a [T], ki: usize, kj: usize, transposed: bool) -> MatRef<'a, T> {
        let kk = self.kh * self.kw;
        let (rs, cs) = if transposed { (kk, self.c_in * kk) } else { (self.c_in * kk, kk) };
        MatRef {
            data: w,
            offset: ki * self.kw + kj,
            rs,
            cs,
        }
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize)> {
        let kw = self.kw;
        (0..self.kh * kw).map(move |t| (t / kw, t % kw))
    }

    /// `[c_out, h_out, w_out]` convolution without bias.
    fn shifted_forward<T: Scalar>(&self, x: &[T], w: &[T], c_out: usize) -> Vec<T> {
        let (xp, wide, plane, wp) = (self.pad(x), self.wide(), self.plane(), self.wp());
        let mut o = vec![T::zero(); c_out * wide];
        for (ki, kj) in self.taps() {
            let window = MatRef {
                data: &xp,
                offset: ki * wp + kj,
                rs: plane,
                cs: 1,
            };
            let dst = MatMut {
                data: &mut o,
                offset: 0,
                rs: wide,
                cs: 1,
            };
            T::gemm_strided((c_out, self.c_in, wide), self.tap(w, ki, kj, false), window, dst, true);
        }
        self.narrow(&o, c_out)
    }

    fn shifted_backward_input<T: Scalar>(&self, gw: &[T], w: &[T], c_out: usize) -> Vec<T> {
        let (wide, plane, wp) = (self.wide(), self.plane(), self.wp());
        let mut dxp = vec![T::zero(); self.c_in * plane];
        for (ki, kj) in self.taps() {
            let dst = MatMut {
                data: &mut dxp,
                offset: ki * wp + kj,
                rs: plane,
                cs: 1,
            };
            let g = MatRef::dense(gw, c_out, wide, false);
            T::gemm_strided((self.c_in, c_out, wide), self.tap(w, ki, kj, true), g, dst, true);
        }
        self.unpad(&dxp)
    }

    fn shifted_backward_weight<T: Scalar>(&self, gw: &[T], x: &[T], c_out: usize) -> Vec<T> {
        let (xp, wide, plane, wp) = (self.pad(x), self.wide(), self.plane(), self.wp());
        let kk = self.kh * self.kw;
        let mut dw = vec![T::zero(); c_out * self.c_in * kk];
        for (ki, kj) in self.taps() {
            let window_t = MatRef {
                data: &xp,
                offset: ki * wp + kj,
                rs: 1,
                cs: plane,
            };
            let dst = MatMut {
                data: &mut dw,
                offset: ki * self.kw + kj,
                rs: self.c_in * kk,
                cs: kk,
            };
            let g = MatRef::dense(gw, c_out, wide, false);
            T::gemm_strided((c_out, wide, self.c_in), g, window_t, dst, false);
        }
        dw
    }

    /// Output columns `[lo, hi)` whose input column `ow·stride + kj − pad_left`
    /// lies inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let first = |off: usize| off.div_ceil(self.stride);
        let lo = first(self.pad_left.saturating_sub(kj));
        let hi = first((self.w + self.pad_left).saturating_sub(kj)).min(self.w_out);
        (lo, hi.max(lo))
    }

    /// Visit each kernel tap and output row with a valid input row:
    /// `f(cols_row, oh, input_row_offset, kj)`.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for ci in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oh in 0..self.h_out {
                        let ih = oh * self.stride + ki;
                        if ih < self.pad_top || ih - self.pad_top >= self.h {
                            continue;
                        }
                        f(row, oh, (ci * self.h + ih - self.pad_top) * self.w, kj);
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let p = self.p();
        let mut cols = vec![T::zero(); self.k() * p];
        self.for_each_row(|row, oh, src, kj| {
            let (lo, hi) = self.valid_cols(kj);
            let dst = &mut cols[row * p + oh * self.w_out..][lo..hi];
            let start = src + lo * self.stride + kj - self.pad_left;
            if self.stride == 1 {
                dst.copy_from_slice(&x[start..start + (hi - lo)]);
            } else {
                for (d, s) in dst.iter_mut().zip(x[start..].iter().step_by(self.stride)) {
                    *d = *s;
                }
            }
        });
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let p = self.p();
        let mut x = vec![T::zero(); self.c_in * self.h * self.w];
        self.for_each_row(|row, oh, dst, kj| {
            let (lo, hi) = self.valid_cols(kj);
            let src = &cols[row * p + oh * self.w_out..][lo..hi];
            let start = dst + lo * self.stride + kj - self.pad_left;
            for (s, d) in src.iter().zip(x[start..].iter_mut().step_by(self.stride)) {
                *d += *s;
            }
        });
        x
    }
}

struct Conv2dOp {
    geom: ConvGeom,
}

impl<T: Scalar> BackwardOp<T> for Conv2dOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let geom = &self.geom;
        let (input, weight) = (x[0], x[1]);
        let c_out = weight.dims()[0];
        let (k, p) = (geom.k(), geom.p());

        if geom.is_shifted() {
            let gw = geom.widen(g.data(), c_out);
            let dx = needs[0].then(|| {
                let d = geom.shifted_backward_input(&gw, weight.data(), c_out);
                Tensor::new(input.dims().to_vec(), d).unwrap()
            });
            let dw = needs[1].then(|| {
                let d = geom.shifted_backward_weight(&gw, input.data(), c_out);
                Tensor::new(weight.dims().to_vec(), d).unwrap()
            });
            let db = needs[2].then(|| bias_grad(g, c_out, p));
            return vec![dx, dw, db];
        }

        let dx = needs[0].then(|| {
            let mut dcols = vec![T::zero(); k * p];
            T::gemm(k, c_out, p, weight.data(), true, g.data(), false, &mut dcols, false);
            let data = if geom.is_pointwise() { dcols } else { geom.col2im(&dcols) };
            Tensor::new(input.dims().to_vec(), data).unwrap()
        });
        let dw = needs[1].then(|| {
            let owned;
            let cols: &[T] = if geom.is_pointwise() {
                input.data()
            } else {
                owned = geom.im2col(input.data());
                &owned
            };
            let mut out = vec![T::zero(); c_out * k];
            T::gemm(c_out, p, k, g.data(), false, cols, true, &mut out, false);
            Tensor::new(weight.dims().to_vec(), out).unwrap()
        });
        let db = needs[2].then(|| bias_grad(g, c_out, p));
        vec![dx, dw, db]
    }
}

fn bias_grad<T: Scalar>(g: &Tensor<T>, c_out: usize, p: usize) -> Tensor<T> {
    let data = g.data().chunks(p).map(|row| row.iter().copied().sum()).collect();
    Tensor::new(vec![c_out], data).unwrap()
}

// -------------------------------------------------------------------- pooling

struct MaxPoolOp {
    argmax: Vec<u32>,
}
impl<T: Scalar> BackwardOp<T> for MaxPoolOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros_like(x[0]);
        let d = dx.data_mut();
        for (&idx, &gv) in self.argmax.iter().zip(g.data()) {
            d[idx as usize] += gv;
        }
        vec![Some(dx)]
    }
}

struct AvgPoolOp {
    k: usize,
}
impl<T: Scalar> BackwardOp<T> for AvgPoolOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, h, w) = x[0].chw("avgpool2d").unwrap();
        let k = self.k;
        let (ho, wo) = (h / k, w / k);
        let inv = T::one() / T::from_usize(k * k).unwrap();
        let mut dx = Tensor::zeros(&[c, h, w]);
        for (r, row) in dx.data_mut().chunks_mut(w).enumerate() {
            let (ci, y) = (r / h, r % h);
            let src = &g.data()[(ci * ho + y / k) * wo..][..wo];
            for (cell, &gv) in row.chunks_mut(k).zip(src) {
                cell.fill(gv * inv);
            }
        }
        vec![Some(dx)]
    }
}

// ------------------------------------------------------------- pixel shuffle

/// Visit every `(output, input)` index pair of a pixel shuffle from
/// `[c·r², h, w]` to `[c, h·r, w·r]`.
fn for_each_shuffle(c: usize, h: usize, w: usize, r: usize, mut f: impl FnMut(usize, usize)) {
    let (ho, wo) = (h * r, w * r);
    for ci in 0..c {
        for i in 0..r {
            for j in 0..r {
                let plane = ((ci * r + i) * r + j) * h * w;
                for hi in 0..h {
                    let out_row = (ci * ho + hi * r + i) * wo + j;
                    let in_row = plane + hi * w;
                    for wi in 0..w {
                        f(out_row + wi * r, in_row + wi);
                    }
                }
            }
        }
    }
}

/// Shuffled copy of `x`; `forward` selects depth-to-space or its inverse.
fn shuffle_copy<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, r: usize, forward: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if forward {
        for_each_shuffle(c, h, w, r, |o, i| out[o] = x[i]);
    } else {
        for_each_shuffle(c, h, w, r, |o, i| out[i] = x[o]);
    }
    out
}

struct PixelShuffleOp {
    c: usize,
    h: usize,
    w: usize,
    r: usize,
}
impl<T: Scalar> BackwardOp<T> for PixelShuffleOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let d = shuffle_copy(g.data(), self.c, self.h, self.w, self.r, false);
        vec![Some(Tensor::new(x[0].dims().to_vec(), d).unwrap())]
    }
}

struct PixelUnshuffleOp {
    c: usize,
    h: usize,
    w: usize,
    r: usize,
}
impl<T: Scalar> BackwardOp<T> for PixelUnshuffleOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, h, w, r) = (self.c, self.h, self.w, self.r);
        let d = shuffle_copy(g.data(), c, h, w, r, true);
        vec![Some(Tensor::new(vec![c, h * r, w * r], d).unwrap())]
    }
}

// --------------------------------------------------------------------- losses

struct CosineDistanceOp<T> {
    dot: T,
    na: T,
    nb: T,
    denom: T,
    floored: bool,
}
impl<T: Scalar> BackwardOp<T> for CosineDistanceOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = g.data()[0];
        // L = 1 - dot / denom, denom = |a||b| (or the floor, a constant)
        let grad = |this: &Tensor<T>, other: &Tensor<T>, n_this: T| {
            let inv = T::one() / self.denom;
            let corr = if self.floored {
                T::zero()
            } else {
                self.dot / (self.denom * n_this * n_this)
            };
            zip_map(this, other, |s, o| -g * (o * inv - s * corr))
        };
        vec![
            needs[0].then(|| grad(x[0], x[1], self.na)),
            needs[1].then(|| grad(x[1], x[0], self.nb)),
        ]
    }
}

struct MseOp;
impl<T: Scalar> BackwardOp<T> for MseOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = g.data()[0] * T::lit(2.0) / T::from_usize(x[0].numel()).unwrap();
        vec![
            needs[0].then(|| zip_map(x[0], x[1], |a, b| s * (a - b))),
            needs[1].then(|| zip_map(x[0], x[1], |a, b| s * (b - a))),
        ]
    }
}

/// Floor applied to `|a|·|b|` in [`Var::cosine_distance`].
pub const COSINE_DENOM_FLOOR: f64 = 1e-12;

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_dims("add", &a, &b)?;
        Ok(self.tape().record(&[self, other], zip_map(&a, &b, |x, y| x + y), AddOp))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_dims("sub", &a, &b)?;
        Ok(self.tape().record(&[self, other], zip_map(&a, &b, |x, y| x - y), SubOp))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_dims("mul", &a, &b)?;
        Ok(self.tape().record(&[self, other], zip_map(&a, &b, |x, y| x * y), MulOp))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * c);
        self.tape().record(&[self], out, ScaleOp(c))
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.tape().record(&[self], out, SumOp { mean: false })
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / T::from_usize(v.numel()).unwrap());
        self.tape().record(&[self], out, SumOp { mean: true })
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(dims)?;
        Ok(self.tape().record(&[self], out, ReshapeOp))
    }

    pub fn flatten(self) -> Var<'t, T> {
        let n = self.value().numel();
        self.reshape(&[n]).expect("numel preserved")
    }

    pub fn relu(self) -> Var<'t, T> {
        let out = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape().record(&[self], out, ReluOp)
    }

    /// Per-channel `x * scale[c] + shift[c]` on a `[C, H, W]` tensor.
    pub fn channel_affine(self, scale: &[T], shift: &[T]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = x.chw("channel_affine")?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::dims("channel_affine", format!("{} channels", scale.len()), x.dims()));
        }
        let plane = h * w;
        let xd = x.data();
        let out = Tensor::from_fn(x.dims(), |i| xd[i] * scale[i / plane] + shift[i / plane]);
        let op = ChannelAffineOp {
            scale: scale.to_vec(),
        };
        Ok(self.tape().record(&[self], out, op))
    }

    /// `weight · self + bias` for `self: [N]`, `weight: [M, N]`, `bias: [M]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (m, n) = match w.dims() {
            &[m, n] => (m, n),
            d => return Err(Error::dims("linear", "weight [M, N]", d)),
        };
        if x.dims() != [n] {
            return Err(Error::dims("linear", format!("input [{n}]"), x.dims()));
        }
        if b.dims() != [m] {
            return Err(Error::dims("linear", format!("bias [{m}]"), b.dims()));
        }
        let mut out = b.data().to_vec();
        T::gemm(m, n, 1, w.data(), false, x.data(), false, &mut out, true);
        let out = Tensor::new(vec![m], out)?;
        Ok(self.tape().record(&[self, weight, bias], out, LinearOp))
    }

    /// Cross-correlation of `self: [C_in, H, W]` with `weight: [C_out, C_in, kH, kW]`.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var<'t, T>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (c_in, h, wd) = x.chw("conv2d")?;
        let (c_out, kc, kh, kw) = match w.dims() {
            &[co, ci, kh, kw] => (co, ci, kh, kw),
            d => return Err(Error::dims("conv2d", "weight [C_out, C_in, kH, kW]", d)),
        };
        if kc != c_in {
            return Err(Error::dims(
                "conv2d",
                format!("weight with C_in = {c_in} (input {:?})", x.dims()),
                w.dims(),
            ));
        }
        if b.dims() != [c_out] {
            return Err(Error::dims("conv2d", format!("bias [{c_out}]"), b.dims()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let (pt, pl, pb, pr) = padding.amounts(kh, kw);
        let (hp, wp) = (h + pt + pb, wd + pl + pr);
        if hp < kh || wp < kw {
            return Err(Error::dims(
                "conv2d",
                format!("input at least {kh}x{kw} after padding"),
                x.dims(),
            ));
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad_top: pt,
            pad_left: pl,
            h_out: (hp - kh) / stride + 1,
            w_out: (wp - kw) / stride + 1,
        };
        let (k, p) = (geom.k(), geom.p());
        let mut out = Vec::with_capacity(c_out * p);
        for &bv in b.data() {
            out.extend(std::iter::repeat(bv).take(p));
        }
        if geom.is_shifted() {
            let conv = geom.shifted_forward(x.data(), w.data(), c_out);
            for (o, v) in out.iter_mut().zip(conv) {
                *o += v;
            }
        } else if geom.is_pointwise() {
            T::gemm(c_out, k, p, w.data(), false, x.data(), false, &mut out, true);
        } else {
            let cols = geom.im2col(x.data());
            T::gemm(c_out, k, p, w.data(), false, &cols, false, &mut out, true);
        }
        let out = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.tape().record(&[self, weight, bias], out, Conv2dOp { geom }))
    }

    /// Non-overlapping k×k max pooling. Ties route the gradient to the first
    /// element in row-major window order.
    pub fn maxpool2d(self, k: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = x.chw("maxpool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dims("maxpool2d", format!("H, W divisible by {k}"), x.dims()));
        }
        let (ho, wo) = (h / k, w / k);
        let xd = x.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (ci * h + oy * k) * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (ci * h + oy * k + dy) * w + ox * k + dx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.tape().record(&[self], out, MaxPoolOp { argmax }))
    }

    pub fn avgpool2d(self, k: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (_, h, w) = x.chw("avgpool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dims("avgpool2d", format!("H, W divisible by {k}"), x.dims()));
        }
        let out = avgpool_tensor(&x, k);
        Ok(self.tape().record(&[self], out, AvgPoolOp { k }))
    }

    /// `[C·r², H, W] -> [C, H·r, W·r]`, `out[c, h·r+i, w·r+j] = in[c·r² + i·r + j, h, w]`.
    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (cr, h, w) = x.chw("pixel_shuffle")?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(Error::dims(
                "pixel_shuffle",
                format!("channels divisible by r^2 = {}", r * r),
                x.dims(),
            ));
        }
        let c = cr / (r * r);
        let out = Tensor::new(vec![c, h * r, w * r], shuffle_copy(x.data(), c, h, w, r, true))?;
        Ok(self.tape().record(&[self], out, PixelShuffleOp { c, h, w, r }))
    }

    /// Inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(self, r: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, hr, wr) = x.chw("pixel_unshuffle")?;
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(Error::dims("pixel_unshuffle", format!("H, W divisible by {r}"), x.dims()));
        }
        let (h, w) = (hr / r, wr / r);
        let out = Tensor::new(vec![c * r * r, h, w], shuffle_copy(x.data(), c, h, w, r, false))?;
        Ok(self.tape().record(&[self], out, PixelUnshuffleOp { c, h, w, r }))
    }

    /// `1 - <a, b> / max(|a|·|b|, 1e-12)` over all elements. The flag is set
    /// when the floor was hit (a zero feature vector).
    pub fn cosine_distance(self, other: Var<'t, T>) -> Result<(Var<'t, T>, bool)> {
        let (a, b) = (self.value(), other.value());
        same_dims("cosine_distance", &a, &b)?;
        let dot: T = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum();
        let (na, nb) = (a.norm(), b.norm());
        let floor = T::lit(COSINE_DENOM_FLOOR);
        let raw = na * nb;
        let floored = !(raw > floor);
        let denom = if floored { floor } else { raw };
        let out = Tensor::scalar(T::one() - dot / denom);
        let op = CosineDistanceOp {
            dot,
            na,
            nb,
            denom,
            floored,
        };
        Ok((self.tape().record(&[self, other], out, op), floored))
    }

    /// Mean over elements of `(self - other)²`.
    pub fn mse(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_dims("mse", &a, &b)?;
        let n = T::from_usize(a.numel()).unwrap();
        let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.tape().record(&[self, other], Tensor::scalar(s / n), MseOp))
    }
}

/// k×k mean pooling of a `[C, H, W]` tensor outside any tape.
pub fn avgpool_tensor<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (c, h, w) = x.chw("avgpool2d").expect("rank 3");
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let xd = x.data();
    Tensor::from_fn(&[c, ho, wo], |o| {
        let ci = o / (ho * wo);
        let (oy, ox) = ((o % (ho * wo)) / wo, o % wo);
        let mut s = T::zero();
        for dy in 0..k {
            let row = &xd[(ci * h + oy * k + dy) * w + ox * k..][..k];
            for &v in row {
                s += v;
            }
        }
        s * inv
    })
}
