//! Central finite-difference checks of reverse-mode gradients (f64).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than
/// relatively.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub eps: f64,
    pub seed: u64,
    /// Give up after this many probes were rejected as non-smooth.
    pub max_skips: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 100,
            eps: 1e-5,
            seed: 0,
            max_skips: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    /// Probes rejected because the perturbation crossed a non-smooth point.
    pub skipped: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst probe.
    pub worst: (usize, usize, f64, f64),
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare the gradient of the scalar `f(inputs)` with central differences
/// at randomly chosen input elements. `smooth(plus, minus)` receives the two
/// perturbed input sets and rejects probes whose perturbation straddles a
/// kink.
pub fn check_gradients<F, S>(inputs: &[Tensor<f64>], f: F, smooth: S, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    S: Fn(&[Tensor<f64>], &[Tensor<f64>]) -> bool,
{
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    if total == 0 {
        return Err(Error::invalid("gradcheck", "no input elements"));
    }
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros_like(t)))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        probes: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
    };
    while report.probes < cfg.probes {
        let mut k = rng.gen_range(0..total);
        let mut which = 0;
        while k >= inputs[which].numel() {
            k -= inputs[which].numel();
            which += 1;
        }
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        plus[which].data_mut()[k] += cfg.eps;
        minus[which].data_mut()[k] -= cfg.eps;
        if !smooth(&plus, &minus) {
            report.skipped += 1;
            if report.skipped > cfg.max_skips {
                return Err(Error::invalid("gradcheck", "too many probes hit non-smooth points"));
            }
            continue;
        }
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * cfg.eps);
        let analytic = grads[which].data()[k];
        let err = rel_err(analytic, numeric);
        if !(err <= report.max_rel_err) {
            report.max_rel_err = err;
            report.worst = (which, k, analytic, numeric);
        }
        report.probes += 1;
    }
    Ok(report)
}

/// Always-smooth predicate for [`check_gradients`].
pub fn everywhere(_: &[Tensor<f64>], _: &[Tensor<f64>]) -> bool {
    true
}
