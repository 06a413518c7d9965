use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based), in place.
pub fn adam_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::dims(
            "adam",
            format!("{n} elements in grad and moments"),
            &[grad.len(), m.len(), v.len()],
        ));
    }
    if t == 0 {
        return Err(Error::invalid("adam", "step counter starts at 1"));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..n {
        let g = grad[i].to_f64().unwrap();
        let mi = b1 * m[i].to_f64().unwrap() + (1.0 - b1) * g;
        let vi = b2 * v[i].to_f64().unwrap() + (1.0 - b2) * g * g;
        m[i] = T::lit(mi);
        v[i] = T::lit(vi);
        let update = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        param[i] = T::lit(param[i].to_f64().unwrap() - update);
    }
    Ok(())
}

/// Adam state for every trainable parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub cfg: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments, indexed like the parameter set; `None` for
    /// frozen parameters.
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, cfg: AdamConfig) -> Self {
        let moments = params
            .iter()
            .map(|p| p.trainable.then(|| (Tensor::zeros_like(&p.value), Tensor::zeros_like(&p.value))))
            .collect();
        Self { cfg, t: 0, moments }
    }

    /// Apply `grads` (indexed like the parameters). Missing gradients count
    /// as zero for trainable parameters.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != self.moments.len() || params.len() != self.moments.len() {
            return Err(Error::dims("adam", format!("{} parameters", self.moments.len()), &[grads.len()]));
        }
        self.t += 1;
        let ids: Vec<_> = params.ids().collect();
        for (i, slot) in self.moments.iter_mut().enumerate() {
            let Some((m, v)) = slot else { continue };
            let value = params.value_mut(ids[i]);
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros_like(value);
                    &zero
                }
            };
            adam_step(value.data_mut(), g.data(), m.data_mut(), v.data_mut(), &self.cfg, self.t)?;
        }
        Ok(())
    }
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64().unwrap().powi(2))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let cfg = AdamConfig::default();
        let (mut p, mut m, mut v) = ([1.5f64], [0.2], [0.04]);
        adam_step(&mut p, &[0.0], &mut m, &mut v, &cfg, 3).unwrap();
        assert!((m[0] - 0.18).abs() < 1e-15);
        assert!((v[0] - 0.04 * 0.999).abs() < 1e-15);
        // The update uses the decayed first moment, so the parameter does move
        // unless the moments are zero.
        let (mut p2, mut m2, mut v2) = ([1.5f64], [0.0], [0.0]);
        adam_step(&mut p2, &[0.0], &mut m2, &mut v2, &cfg, 1).unwrap();
        assert_eq!(p2[0], 1.5);
        assert!(p[0] < 1.5);
    }

    #[test]
    fn three_steps_match_hand_recurrence() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let grads = [0.5, -0.2, 1.0];
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        let (mut ep, mut em, mut ev) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            em = 0.9 * em + 0.1 * g;
            ev = 0.999 * ev + 0.001 * g * g;
            let mh = em / (1.0 - 0.9f64.powi(t));
            let vh = ev / (1.0 - 0.999f64.powi(t));
            ep -= 0.1 * mh / (vh.sqrt() + 1e-8);
            adam_step(&mut p, &[*g], &mut m, &mut v, &cfg, t as u64).unwrap();
            assert!((p[0] - ep).abs() < 1e-14, "step {t}: {} vs {ep}", p[0]);
        }
        assert!((m[0] - em).abs() < 1e-15 && (v[0] - ev).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        for t in 1..=2000 {
            let before = p[0];
            adam_step(&mut p, &[-3.0], &mut m, &mut v, &cfg, t).unwrap();
            if t > 1000 {
                assert!((p[0] - before - 0.01).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap()), None];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].as_ref().unwrap().data(), &[3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let cfg = AdamConfig::default();
        assert!(adam_step(&mut [0.0f64; 2], &[0.0], &mut [0.0; 2], &mut [0.0; 2], &cfg, 1).is_err());
    }
}
