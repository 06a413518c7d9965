//! End-to-end training: mini-batch Adam over the cropper and enhancer
//! parameters, loss bookkeeping and checkpoints.

mod adam;
mod checkpoint;
mod pretrain;

pub use adam::{adam_step, clip_global_norm, Adam, AdamConfig};
pub use checkpoint::{import_gamma, Checkpoint, CheckpointState, RngState, MAGIC, VERSION};
pub use pretrain::{pretrain_enhancer, PretrainConfig};

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{DCEModel, ModelConfig, TargetFeatures};
use crate::synthgen::Manifest;

pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.dcec";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Network layout, including the number of croppers, whether the
    /// enhancer exists and whether Γ is frozen.
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Seeds batch shuffling.
    pub seed: u64,
    /// Global gradient norm cap.
    pub grad_clip: f64,
    /// Evaluate the full-dataset loss every this many steps (0 disables).
    pub eval_every: u64,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Checkpoint whose Γ weights (and layout) replace the initialization.
    #[serde(default)]
    pub import_gamma: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 8,
            max_steps: 1000,
            seed: 0,
            grad_clip: 10.0,
            eval_every: 0,
            checkpoint_every: 0,
            import_gamma: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("train config", msg));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.adam.lr > 0.0 && self.adam.eps > 0.0) {
            return bad("learning rate and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return bad("gradient clip must be positive");
        }
        self.model.validate()
    }
}

/// One training example held in memory.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub photo: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub gt_hr: Option<Tensor<f32>>,
}

impl TrainSample {
    /// Every manifest sample, with the high-resolution target dropped when
    /// it is not needed.
    pub fn load_manifest(manifest: &Manifest, with_hr: bool) -> Result<Vec<Self>> {
        Ok(manifest
            .load_all()?
            .into_iter()
            .map(|s| TrainSample {
                id: s.record.id,
                photo: s.photo.into_tensor(),
                gt: s.gt.into_tensor(),
                gt_hr: if with_hr { s.gt_hr.map(|t| t.into_tensor()) } else { None },
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub cropper: f64,
    pub enhancer: Option<f64>,
}

/// Per-sample losses of one forward/backward pass.
struct SampleResult {
    grads: Vec<Option<Tensor<f32>>>,
    total: f64,
    cropper: f64,
    enhancer: Option<f64>,
    degenerate: bool,
}

/// Γ features that stay fixed while Γ is frozen.
struct Cached {
    photo: Tensor<f32>,
    targets: TargetFeatures<f32>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: DCEModel<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
    pub history: Vec<LossRecord>,
    /// `(step, mean loss over the whole dataset)` from periodic evaluation.
    pub evals: Vec<(u64, LossRecord)>,
    rng: ChaCha8Rng,
    data: Vec<TrainSample>,
    cache: Option<Vec<Cached>>,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Vec<TrainSample>) -> Result<Self> {
        let model = DCEModel::new(config.model.clone())?;
        Self::with_model(config, model, data)
    }

    /// Start from an existing model (whose configuration replaces
    /// `config.model`).
    pub fn with_model(mut config: TrainConfig, model: DCEModel<f32>, data: Vec<TrainSample>) -> Result<Self> {
        config.model = model.config.clone();
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        let s = model.input_size();
        for d in &data {
            if d.photo.dims() != [3, s, s] || d.gt.dims() != [3, s, s] {
                return Err(Error::dims(
                    "training sample",
                    format!("{} photo and target [3, {s}, {s}]", d.id),
                    d.photo.dims(),
                ));
            }
            if model.enhancer.is_some() && d.gt_hr.is_none() {
                return Err(Error::Dataset(format!("sample {} lacks a high-resolution target", d.id)));
            }
        }
        let cache = if model.gamma.is_frozen() {
            let c = data
                .par_iter()
                .map(|d| {
                    Ok(Cached {
                        photo: model.features(&d.photo)?,
                        targets: model.target_features(&d.gt, d.gt_hr.as_ref())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(c)
        } else {
            None
        };
        let adam = Adam::new(&model.params, config.adam);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let order = (0..data.len()).collect();
        Ok(Self {
            cursor: data.len(),
            config,
            model,
            adam,
            step: 0,
            history: Vec::new(),
            evals: Vec::new(),
            rng,
            data,
            cache,
            order,
        })
    }

    pub fn data(&self) -> &[TrainSample] {
        &self.data
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// Next mini-batch of sample indices, reshuffling at epoch boundaries.
    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Forward and (optionally) backward pass on sample `i`.
    fn run_sample(&self, i: usize, backward: bool) -> Result<SampleResult> {
        let model = &self.model;
        let d = &self.data[i];
        let computed;
        let (photo_f, targets) = match &self.cache {
            Some(c) => (Some(&c[i].photo), &c[i].targets),
            None => {
                computed = model.target_features(&d.gt, d.gt_hr.as_ref())?;
                (None, &computed)
            }
        };
        let tape = Tape::new();
        let p = if backward {
            model.bind(&tape)
        } else {
            model.params.bind_constant(&tape)
        };
        let photo = tape.constant(d.photo.clone());
        let out = model.forward(&p, photo, photo_f.map(|f| tape.constant(f.clone())))?;
        let terms = model.total_loss(&p, &out, targets)?;
        let total = terms.total.item() as f64;
        let cropper = terms.cropper.item() as f64;
        let enhancer = terms.enhancer.map(|e| e.item() as f64);
        let grads = if backward && total.is_finite() {
            tape.backward(terms.total)?;
            p.grads()
        } else {
            Vec::new()
        };
        Ok(SampleResult {
            grads,
            total,
            cropper,
            enhancer,
            degenerate: terms.degenerate,
        })
    }

    fn check_finite(&self, r: &SampleResult) -> Result<()> {
        if !r.cropper.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                term: "L_C",
            });
        }
        if r.enhancer.is_some_and(|e| !e.is_finite()) || !r.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                term: "L_E",
            });
        }
        Ok(())
    }

    /// One Adam update on a fresh mini-batch; returns the batch-mean losses.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let batch = self.next_batch();
        let results = batch
            .par_iter()
            .map(|&i| self.run_sample(i, true))
            .collect::<Result<Vec<_>>>()?;
        let n = results.len() as f64;
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; self.model.params.len()];
        let (mut total, mut cropper, mut enhancer) = (0.0, 0.0, 0.0);
        for r in &results {
            self.check_finite(r)?;
            if r.degenerate {
                log::warn!("step {}: all-zero feature vector in the cropper loss", self.step + 1);
            }
            total += r.total;
            cropper += r.cropper;
            enhancer += r.enhancer.unwrap_or(0.0);
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(g),
                    (None, Some(g)) => *acc = Some(g.clone()),
                    _ => {}
                }
            }
        }
        let inv = (1.0 / n) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        let norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                term: if results.iter().any(|r| r.enhancer.is_some()) { "L_E" } else { "L_C" },
            });
        }
        self.adam.step(&mut self.model.params, &grads)?;
        self.step += 1;
        let rec = LossRecord {
            step: self.step,
            total: total / n,
            cropper: cropper / n,
            enhancer: self.model.enhancer.as_ref().map(|_| enhancer / n),
        };
        self.history.push(rec);
        Ok(rec)
    }

    /// Mean losses over every training sample, without updating anything.
    pub fn evaluate(&self) -> Result<LossRecord> {
        let results = (0..self.data.len())
            .into_par_iter()
            .map(|i| self.run_sample(i, false))
            .collect::<Result<Vec<_>>>()?;
        let n = results.len() as f64;
        let mean = |f: &dyn Fn(&SampleResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        Ok(LossRecord {
            step: self.step,
            total: mean(&|r| r.total),
            cropper: mean(&|r| r.cropper),
            enhancer: self
                .model
                .enhancer
                .as_ref()
                .map(|_| mean(&|r| r.enhancer.unwrap_or(0.0))),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let state = CheckpointState {
            model: self.model.config.clone(),
            train: Some(self.config.clone()),
            rng: Some(self.rng_state()),
        };
        Checkpoint::capture(&self.model, Some(&self.adam), state, self.step)
    }

    /// Run until `config.max_steps`, evaluating and checkpointing on the
    /// configured schedule. Intermediate checkpoints go to `out_dir` when
    /// given.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        let every = |k: u64, step: u64| k > 0 && step % k == 0;
        if self.config.eval_every > 0 && self.step == 0 {
            let e = self.evaluate()?;
            log::info!("step 0: dataset loss {:.5} (L_C {:.5})", e.total, e.cropper);
            self.evals.push((0, e));
        }
        while self.step < self.config.max_steps {
            let rec = self.train_step()?;
            log::debug!("step {}: loss {:.5}", rec.step, rec.total);
            if every(self.config.eval_every, self.step) {
                let e = self.evaluate()?;
                log::info!("step {}: dataset loss {:.5} (L_C {:.5})", self.step, e.total, e.cropper);
                self.evals.push((self.step, e));
            }
            if let Some(dir) = out_dir {
                if every(self.config.checkpoint_every, self.step) {
                    self.checkpoint().save(dir.join(format!("checkpoint_{:06}.dcec", self.step)))?;
                }
            }
        }
        Ok(())
    }
}

/// Loss history as CSV with header `step,loss_total,loss_cropper,loss_enhancer`;
/// the enhancer column is empty when there is no enhancer.
pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,loss_total,loss_cropper,loss_enhancer\n");
    for r in history {
        let e = r.enhancer.map(|e| e.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.total, r.cropper, e));
    }
    out
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
    pub evals: Vec<(u64, LossRecord)>,
}

/// Train on every sample of `manifest`, writing `loss.csv`,
/// `checkpoint.dcec` and any intermediate checkpoints into `out_dir`.
/// The model input size follows the manifest's image size.
pub fn train_loop(config: &TrainConfig, manifest: &Manifest, out_dir: &Path) -> Result<TrainOutcome> {
    if manifest.is_empty() {
        return Err(Error::Dataset("manifest lists no samples".into()));
    }
    let mut config = config.clone();
    let gamma_ckpt = config.import_gamma.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &gamma_ckpt {
        config.model.gamma = ck.state.model.gamma.clone();
        config.model.head = crate::model::HeadConfig::for_features(config.model.gamma.feature_channels());
    }
    let data = TrainSample::load_manifest(manifest, config.model.enhancer.is_some())?;
    let size = data[0].photo.dims()[1];
    if size != config.model.input_size {
        log::info!("using input size {size} from the dataset");
        config.model.input_size = size;
    }
    let mut model = DCEModel::new(config.model.clone())?;
    if let Some(ck) = &gamma_ckpt {
        let n = import_gamma(&mut model, ck)?;
        log::info!("imported {n} feature extractor tensors");
    }
    fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::with_model(config, model, data)?;
    let result = trainer.run(Some(out_dir));
    let mut csv = fs::File::create(out_dir.join(LOSS_CSV))?;
    csv.write_all(loss_csv(&trainer.history).as_bytes())?;
    result?;
    let checkpoint = trainer.checkpoint();
    checkpoint.save(out_dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainOutcome {
        checkpoint,
        history: trainer.history,
        evals: trainer.evals,
    })
}
