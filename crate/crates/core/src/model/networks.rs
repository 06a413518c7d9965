use crate::diffcore::{Bound, Conv2d, Linear, Padding, ParamSet, Scalar, Tensor, Var};
use crate::error::{Error, Result};

use super::config::{EnhancerConfig, GammaConfig, HeadConfig, IMAGENET_MEAN, IMAGENET_STD};

/// Bias of the last cropper layer: the identity affine transform.
pub const IDENTITY_BIAS: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Frozen-by-default convolutional feature extractor Γ.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    blocks: Vec<Vec<Conv2d>>,
    input_size: usize,
    frozen: bool,
}

impl FeatureExtractor {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        cfg: &GammaConfig,
        input_size: usize,
        seed: u64,
        frozen: bool,
    ) -> Self {
        let mut c_in = 3;
        let blocks = cfg
            .widths
            .iter()
            .zip(&cfg.convs_per_block)
            .enumerate()
            .map(|(b, (&width, &n))| {
                (0..n)
                    .map(|i| {
                        let name = format!("gamma.block{b}.conv{i}");
                        let conv = Conv2d::new(params, &name, c_in, width, (3, 3), Padding::Same, seed, !frozen);
                        c_in = width;
                        conv
                    })
                    .collect()
            })
            .collect();
        Self {
            blocks,
            input_size,
            frozen,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, img: Var<'t, T>) -> Result<Var<'t, T>> {
        let dims = img.dims();
        if dims != [3, self.input_size, self.input_size] {
            return Err(Error::dims(
                "feature extractor",
                format!("[3, {0}, {0}]", self.input_size),
                &dims,
            ));
        }
        let scale: Vec<T> = IMAGENET_STD.iter().map(|s| T::lit(1.0 / s)).collect();
        let shift: Vec<T> = IMAGENET_MEAN.iter().zip(IMAGENET_STD).map(|(m, s)| T::lit(-m / s)).collect();
        let mut x = img.channel_affine(&scale, &shift)?;
        for block in &self.blocks {
            for conv in block {
                x = conv.forward(p, x)?.relu();
            }
            x = x.maxpool2d(2)?;
        }
        Ok(x)
    }
}

/// Regression head mapping Γ features to the 6 affine parameters.
#[derive(Clone, Debug)]
pub struct CropperHead {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl CropperHead {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        c_f: usize,
        feature_size: usize,
        cfg: &HeadConfig,
        seed: u64,
    ) -> Self {
        let conv1 = Conv2d::new(params, &format!("{name}.conv1"), c_f, cfg.conv1, (2, 2), Padding::Same, seed, true);
        let conv2 = Conv2d::new(params, &format!("{name}.conv2"), cfg.conv1, cfg.conv2, (1, 1), Padding::Valid, seed, true);
        let flat = cfg.conv2 * feature_size * feature_size;
        let fc1 = Linear::new(params, &format!("{name}.fc1"), flat, cfg.fc1, seed);
        let fc2 = Linear::new(params, &format!("{name}.fc2"), cfg.fc1, cfg.fc2, seed);
        let fc3 = Linear::new(params, &format!("{name}.fc3"), cfg.fc2, 6, seed);
        *params.value_mut(fc3.weight) = Tensor::zeros(&[6, cfg.fc2]);
        *params.value_mut(fc3.bias) = Tensor::new(vec![6], IDENTITY_BIAS.iter().map(|&v| T::lit(v)).collect())
            .expect("six values");
        Self {
            conv1,
            conv2,
            fc1,
            fc2,
            fc3,
        }
    }

    /// Affine parameters `[6]` from features `[C_f, s, s]`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, features: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.conv1.forward(p, features)?.relu();
        let x = self.conv2.forward(p, x)?.relu().flatten();
        let x = self.fc1.forward(p, x)?.relu();
        let x = self.fc2.forward(p, x)?.relu();
        self.fc3.forward(p, x)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Residual super-resolution network: head conv, scaled residual blocks,
/// sub-pixel upsampling and a 3-channel tail. No input-to-output skip.
#[derive(Clone, Debug)]
pub struct Enhancer {
    head: Conv2d,
    blocks: Vec<ResBlock>,
    upsample: Conv2d,
    tail: Conv2d,
    scale: usize,
    res_scale: f64,
}

impl Enhancer {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, cfg: &EnhancerConfig, seed: u64) -> Self {
        let f = cfg.features;
        let mut conv = |name: String, c_in, c_out| Conv2d::new(params, &name, c_in, c_out, (3, 3), Padding::Same, seed, true);
        let head = conv("enhancer.head".into(), 3, f);
        let blocks = (0..cfg.blocks)
            .map(|i| ResBlock {
                conv1: conv(format!("enhancer.block{i}.conv1"), f, f),
                conv2: conv(format!("enhancer.block{i}.conv2"), f, f),
            })
            .collect();
        let upsample = conv("enhancer.upsample".into(), f, f * cfg.scale * cfg.scale);
        let tail = conv("enhancer.tail".into(), f, 3);
        Self {
            head,
            blocks,
            upsample,
            tail,
            scale: cfg.scale,
            res_scale: cfg.res_scale,
        }
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn res_scale(&self) -> f64 {
        self.res_scale
    }

    pub fn set_res_scale(&mut self, s: f64) {
        self.res_scale = s;
    }

    /// `[3, h, w]` → `[3, h·r, w·r]`, unclamped.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, img: Var<'t, T>) -> Result<Var<'t, T>> {
        let (c, _, _) = img.value().chw("enhancer")?;
        if c != 3 {
            return Err(Error::dims("enhancer", "[3, H, W]", &img.dims()));
        }
        let mut x = self.head.forward(p, img)?;
        for b in &self.blocks {
            let r = b.conv2.forward(p, b.conv1.forward(p, x)?.relu())?;
            x = x.add(r.scale(T::lit(self.res_scale)))?;
        }
        let x = self.upsample.forward(p, x)?.pixel_shuffle(self.scale)?;
        self.tail.forward(p, x)
    }
}
