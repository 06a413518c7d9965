use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of conv+ReLU+maxpool(2) blocks in the feature extractor.
pub const GAMMA_BLOCKS: usize = 5;

/// Per-channel input normalization applied before the feature extractor
/// (ImageNet statistics, the convention VGG weights are trained with).
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaConfig {
    /// Output channels of each block; the last entry is the feature width C_f.
    pub widths: Vec<usize>,
    /// 3×3 convolutions per block (VGG19 uses `[2, 2, 4, 4, 4]`).
    pub convs_per_block: Vec<usize>,
}

impl GammaConfig {
    /// Compact stand-in with C_f = 64.
    pub fn compact() -> Self {
        Self {
            widths: vec![16, 32, 64, 64, 64],
            convs_per_block: vec![1; GAMMA_BLOCKS],
        }
    }

    /// VGG19 layout, for importing externally exported weights.
    pub fn vgg19() -> Self {
        Self {
            widths: vec![64, 128, 256, 512, 512],
            convs_per_block: vec![2, 2, 4, 4, 4],
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Filters of the 2×2 convolution.
    pub conv1: usize,
    /// Filters of the 1×1 convolution.
    pub conv2: usize,
    pub fc1: usize,
    pub fc2: usize,
}

impl HeadConfig {
    /// Widths proportionate to the feature width: the full 512/128/1000/80
    /// head for C_f = 512 and a scaled-down 128/32/256/80 head otherwise.
    pub fn for_features(c_f: usize) -> Self {
        if c_f >= 512 {
            Self {
                conv1: 512,
                conv2: 128,
                fc1: 1000,
                fc2: 80,
            }
        } else {
            Self {
                conv1: 128,
                conv2: 32,
                fc1: 256,
                fc2: 80,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhancerConfig {
    pub features: usize,
    pub blocks: usize,
    /// Upscaling factor r.
    pub scale: usize,
    pub res_scale: f64,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            features: 64,
            blocks: 8,
            scale: 2,
            res_scale: 0.1,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square photo, crop and feature-extractor input.
    pub input_size: usize,
    pub gamma: GammaConfig,
    pub head: HeadConfig,
    pub n_croppers: usize,
    /// Γ weights are fixed; gradients still pass through Γ.
    #[serde(default = "default_true")]
    pub gamma_frozen: bool,
    /// Add the cropper loss of every intermediate stage.
    #[serde(default)]
    pub deep_supervision: bool,
    /// `None` trains and runs croppers only.
    pub enhancer: Option<EnhancerConfig>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let gamma = GammaConfig::compact();
        Self {
            input_size: 224,
            head: HeadConfig::for_features(gamma.feature_channels()),
            gamma,
            n_croppers: 1,
            gamma_frozen: true,
            deep_supervision: false,
            enhancer: Some(EnhancerConfig::default()),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Spatial side of the feature map (`input_size / 32`).
    pub fn feature_size(&self) -> usize {
        self.input_size >> GAMMA_BLOCKS
    }

    pub fn upscale(&self) -> usize {
        self.enhancer.map_or(1, |e| e.scale)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model config", msg));
        let g = &self.gamma;
        if g.widths.len() != GAMMA_BLOCKS || g.convs_per_block.len() != GAMMA_BLOCKS {
            return bad(format!("feature extractor needs {GAMMA_BLOCKS} blocks"));
        }
        if g.widths.contains(&0) || g.convs_per_block.contains(&0) {
            return bad("feature extractor widths and conv counts must be positive".into());
        }
        if self.input_size == 0 || self.input_size % (1 << GAMMA_BLOCKS) != 0 {
            return bad(format!(
                "input size {} must be a positive multiple of {}",
                self.input_size,
                1 << GAMMA_BLOCKS
            ));
        }
        if self.n_croppers == 0 {
            return bad("at least one cropper is required".into());
        }
        let h = &self.head;
        if [h.conv1, h.conv2, h.fc1, h.fc2].contains(&0) {
            return bad("head widths must be positive".into());
        }
        if let Some(e) = &self.enhancer {
            if e.features == 0 || e.scale == 0 || !(e.res_scale.is_finite()) {
                return bad(format!("invalid enhancer {e:?}"));
            }
        }
        Ok(())
    }
}
