//! The cropper and enhancer networks, their feature-space losses and the
//! combined objective.

mod config;
mod networks;

pub use config::{
    EnhancerConfig, GammaConfig, HeadConfig, ModelConfig, GAMMA_BLOCKS, IMAGENET_MEAN, IMAGENET_STD,
};
pub use networks::{CropperHead, Enhancer, FeatureExtractor, IDENTITY_BIAS};

use crate::diffcore::{avgpool_tensor, Bound, ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::warp::AffineParams;

/// One cropper stage: predicted transform `[6]` and resampled image.
#[derive(Clone, Copy)]
pub struct Stage<'t, T: Scalar> {
    pub affine: Var<'t, T>,
    pub cropped: Var<'t, T>,
}

pub struct Outputs<'t, T: Scalar> {
    pub stages: Vec<Stage<'t, T>>,
    pub enhanced: Option<Var<'t, T>>,
}

impl<'t, T: Scalar> Outputs<'t, T> {
    pub fn last(&self) -> &Stage<'t, T> {
        self.stages.last().expect("at least one cropper")
    }
}

/// Γ features of the training targets. `gt_hr` is taken after average
/// pooling the high-resolution target down to Γ's input size.
#[derive(Clone, Debug)]
pub struct TargetFeatures<T: Scalar> {
    pub gt: Tensor<T>,
    pub gt_hr: Option<Tensor<T>>,
}

pub struct LossTerms<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub cropper: Var<'t, T>,
    pub enhancer: Option<Var<'t, T>>,
    /// A cosine denominator hit its floor (all-zero feature vector).
    pub degenerate: bool,
}

/// Gradient-free model output.
#[derive(Clone, Debug)]
pub struct Inference<T: Scalar> {
    pub affines: Vec<AffineParams>,
    pub cropped: Tensor<T>,
    pub enhanced: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct DCEModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub gamma: FeatureExtractor,
    pub croppers: Vec<CropperHead>,
    pub enhancer: Option<Enhancer>,
}

impl<T: Scalar> DCEModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let gamma = FeatureExtractor::new(
            &mut params,
            &config.gamma,
            config.input_size,
            config.seed,
            config.gamma_frozen,
        );
        let c_f = config.gamma.feature_channels();
        let croppers = (1..=config.n_croppers)
            .map(|k| {
                CropperHead::new(
                    &mut params,
                    &format!("cropper{k}"),
                    c_f,
                    config.feature_size(),
                    &config.head,
                    config.seed,
                )
            })
            .collect();
        let enhancer = config.enhancer.map(|e| Enhancer::new(&mut params, &e, config.seed));
        Ok(Self {
            config,
            params,
            gamma,
            croppers,
            enhancer,
        })
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.params.bind(tape)
    }

    pub fn gamma_forward<'t>(&self, p: &Bound<'t, T>, img: Var<'t, T>) -> Result<Var<'t, T>> {
        self.gamma.forward(p, img)
    }

    /// Γ of a fixed image, without recording gradients.
    pub fn features(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind_constant(&tape);
        let f = self.gamma.forward(&p, tape.constant(img.clone()))?;
        Ok((*f.value()).clone())
    }

    /// Cropper `k` (0-based) applied to `photo`. `features` may supply a
    /// precomputed Γ(photo).
    pub fn cropper_forward<'t>(
        &self,
        p: &Bound<'t, T>,
        k: usize,
        photo: Var<'t, T>,
        features: Option<Var<'t, T>>,
    ) -> Result<Stage<'t, T>> {
        let head = self
            .croppers
            .get(k)
            .ok_or_else(|| Error::invalid("cropper", format!("no cropper {k}")))?;
        let features = match features {
            Some(f) => f,
            None => self.gamma.forward(p, photo)?,
        };
        let affine = head.forward(p, features)?;
        let s = self.input_size();
        let cropped = photo.grid_sample(affine.affine_grid(s, s)?)?;
        Ok(Stage { affine, cropped })
    }

    /// Chain every cropper, each consuming the previous crop.
    pub fn stacked_forward<'t>(
        &self,
        p: &Bound<'t, T>,
        photo: Var<'t, T>,
        photo_features: Option<Var<'t, T>>,
    ) -> Result<Vec<Stage<'t, T>>> {
        let mut stages: Vec<Stage<'t, T>> = Vec::with_capacity(self.croppers.len());
        for k in 0..self.croppers.len() {
            let stage = match stages.last() {
                None => self.cropper_forward(p, 0, photo, photo_features)?,
                Some(prev) => self.cropper_forward(p, k, prev.cropped, None)?,
            };
            stages.push(stage);
        }
        Ok(stages)
    }

    pub fn enhancer_forward<'t>(&self, p: &Bound<'t, T>, cropped: Var<'t, T>) -> Result<Var<'t, T>> {
        self.enhancer
            .as_ref()
            .ok_or_else(|| Error::invalid("enhancer", "model has no enhancer"))?
            .forward(p, cropped)
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t, T>,
        photo: Var<'t, T>,
        photo_features: Option<Var<'t, T>>,
    ) -> Result<Outputs<'t, T>> {
        let stages = self.stacked_forward(p, photo, photo_features)?;
        let enhanced = match &self.enhancer {
            Some(e) => Some(e.forward(p, stages.last().expect("validated").cropped)?),
            None => None,
        };
        Ok(Outputs { stages, enhanced })
    }

    /// Cosine distance between Γ(cropped) and the target features.
    pub fn cropper_loss<'t>(
        &self,
        p: &Bound<'t, T>,
        cropped: Var<'t, T>,
        gt_features: Var<'t, T>,
    ) -> Result<(Var<'t, T>, bool)> {
        self.gamma.forward(p, cropped)?.cosine_distance(gt_features)
    }

    /// Average-pool `enhanced` by the upscale factor, then the mean squared
    /// difference of Γ features against `gt_hr_features`.
    pub fn enhancer_loss<'t>(
        &self,
        p: &Bound<'t, T>,
        enhanced: Var<'t, T>,
        gt_hr_features: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let r = self.config.upscale();
        let s = self.input_size();
        if enhanced.dims() != [3, s * r, s * r] {
            return Err(Error::dims("enhancer loss", format!("[3, {0}, {0}]", s * r), &enhanced.dims()));
        }
        let pooled = if r == 1 { enhanced } else { enhanced.avgpool2d(r)? };
        self.gamma.forward(p, pooled)?.mse(gt_hr_features)
    }

    pub fn target_features(&self, gt: &Tensor<T>, gt_hr: Option<&Tensor<T>>) -> Result<TargetFeatures<T>> {
        let gt_hr = match (gt_hr, &self.enhancer) {
            (Some(hr), Some(_)) => {
                let r = self.config.upscale();
                let s = self.input_size();
                if hr.dims() != [3, s * r, s * r] {
                    return Err(Error::dims("high-resolution target", format!("[3, {0}, {0}]", s * r), hr.dims()));
                }
                Some(self.features(&avgpool_tensor(hr, r))?)
            }
            (None, Some(_)) => return Err(Error::invalid("targets", "enhancer needs a high-resolution target")),
            (_, None) => None,
        };
        Ok(TargetFeatures {
            gt: self.features(gt)?,
            gt_hr,
        })
    }

    /// Cropper loss on the last stage (and, with deep supervision, every
    /// stage) plus the enhancer loss.
    pub fn total_loss<'t>(
        &self,
        p: &Bound<'t, T>,
        outputs: &Outputs<'t, T>,
        targets: &TargetFeatures<T>,
    ) -> Result<LossTerms<'t, T>> {
        let tape = p.tape();
        let gt = tape.constant(targets.gt.clone());
        let (mut cropper, mut degenerate) = self.cropper_loss(p, outputs.last().cropped, gt)?;
        if self.config.deep_supervision {
            for stage in &outputs.stages[..outputs.stages.len() - 1] {
                let (l, d) = self.cropper_loss(p, stage.cropped, gt)?;
                cropper = cropper.add(l)?;
                degenerate |= d;
            }
        }
        let enhancer = match (outputs.enhanced, &targets.gt_hr) {
            (Some(e), Some(f)) => Some(self.enhancer_loss(p, e, tape.constant(f.clone()))?),
            (Some(_), None) => return Err(Error::invalid("total loss", "missing high-resolution target")),
            (None, _) => None,
        };
        let total = match enhancer {
            Some(e) => cropper.add(e)?,
            None => cropper,
        };
        Ok(LossTerms {
            total,
            cropper,
            enhancer,
            degenerate,
        })
    }

    /// Forward pass with no gradient bookkeeping.
    pub fn infer(&self, photo: &Tensor<T>) -> Result<Inference<T>> {
        let tape = Tape::new();
        let p = self.params.bind_constant(&tape);
        let out = self.forward(&p, tape.constant(photo.clone()), None)?;
        let affines = out
            .stages
            .iter()
            .map(|s| AffineParams::from_slice(s.affine.value().data()))
            .collect::<Result<_>>()?;
        Ok(Inference {
            affines,
            cropped: (*out.last().cropped.value()).clone(),
            enhanced: out.enhanced.map(|e| (*e.value()).clone()),
        })
    }
}
