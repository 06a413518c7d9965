//! Pixel-space super-resolution pretraining of the enhancer, standing in
//! for importing pretrained EDSR weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{clip_global_norm, Adam, AdamConfig};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::DCEModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            grad_clip: 10.0,
        }
    }
}

/// Fit the enhancer to map each `input` (at the model's input size) onto its
/// high-resolution `target` under pixel MSE. Only `enhancer.*` parameters
/// change. Returns the batch-mean loss per step.
pub fn pretrain_enhancer(
    model: &mut DCEModel<f32>,
    pairs: &[(Tensor<f32>, Tensor<f32>)],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if model.enhancer.is_none() {
        return Err(Error::invalid("pretrain", "model has no enhancer"));
    }
    if pairs.is_empty() || cfg.batch_size == 0 {
        return Err(Error::invalid("pretrain", "need at least one pair and a positive batch size"));
    }
    let is_enhancer: Vec<bool> = model.params.iter().map(|p| p.name.starts_with("enhancer.")).collect();
    let mut adam = Adam::new(&model.params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let m = &*model;
        let results = batch
            .par_iter()
            .map(|&i| {
                let tape = Tape::new();
                let p = m.bind(&tape);
                let out = m.enhancer_forward(&p, tape.constant(pairs[i].0.clone()))?;
                let loss = out.mse(tape.constant(pairs[i].1.clone()))?;
                tape.backward(loss)?;
                Ok((loss.item() as f64, p.grads()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
        let mut total = 0.0;
        for (l, g) in &results {
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { step, term: "pixel" });
            }
            total += l;
            for ((acc, g), &keep) in grads.iter_mut().zip(g).zip(&is_enhancer) {
                match (acc.as_mut(), g) {
                    (_, _) if !keep => {}
                    (Some(a), Some(g)) => a.add_assign(g),
                    (None, Some(g)) => *acc = Some(g.clone()),
                    _ => {}
                }
            }
        }
        let inv = 1.0 / batch.len() as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        adam.step(&mut model.params, &grads)?;
        history.push(total / batch.len() as f64);
    }
    Ok(history)
}
