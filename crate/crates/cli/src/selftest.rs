//! `dce selftest`: finite-difference gradient checks of every differentiable
//! op plus a few end-to-end invariants.

use dce_core::diffcore::gradcheck::{check_gradients, everywhere, GradCheckConfig};
use dce_core::diffcore::{ImageRGB, Padding, Tape, Tensor, Var};
use dce_core::metrics::{mse, psnr, ssim};
use dce_core::model::{DCEModel, ModelConfig};
use dce_core::train::{Checkpoint, CheckpointState};
use dce_core::warp::{affine_grid, AffineParams};
use dce_core::Result;

const GRAD_TOL: f64 = 1e-5;

/// Deterministic pseudo-random values in (-1, 1).
fn wave(dims: &[usize], phase: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |i| (i as f64 * 0.731 + phase).sin() * (i as f64 * 0.173 + 2.0 * phase).cos())
}

fn project<'t>(t: &'t Tape<f64>, out: Var<'t, f64>) -> Var<'t, f64> {
    let w = Tensor::from_fn(&out.dims(), |i| (i as f64 * 1.37 + 0.4).sin());
    out.mul(t.constant(w)).and_then(|v| Ok(v.sum())).expect("projection has matching dims")
}

type Op = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

fn away_from_zero(dims: &[usize], phase: f64) -> Tensor<f64> {
    let mut x = wave(dims, phase);
    for v in x.data_mut() {
        *v = v.signum() * (v.abs() + 0.05);
    }
    x
}

fn grad_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Op)> {
    let conv = |stride: usize, pad: Padding| -> Op {
        Box::new(move |t, v| Ok(project(t, v[0].conv2d(v[1], v[2], stride, pad)?)))
    };
    let grid = affine_grid::<f64>(&AffineParams([0.8, 0.1, 0.05, -0.1, 0.85, 0.0]), 6, 7)
        .expect("valid grid")
        .into_tensor();
    vec![
        (
            "conv2d 3x3 same",
            vec![wave(&[3, 6, 7], 0.1), wave(&[4, 3, 3, 3], 0.2), wave(&[4], 0.3)],
            conv(1, Padding::Same),
        ),
        (
            "conv2d 3x3 valid s2",
            vec![wave(&[2, 7, 7], 0.4), wave(&[3, 2, 3, 3], 0.5), wave(&[3], 0.6)],
            conv(2, Padding::Valid),
        ),
        (
            "linear",
            vec![wave(&[7], 0.7), wave(&[5, 7], 0.8), wave(&[5], 0.9)],
            Box::new(|t, v| Ok(project(t, v[0].linear(v[1], v[2])?))),
        ),
        ("relu", vec![away_from_zero(&[30], 1.0)], Box::new(|t, v| Ok(project(t, v[0].relu())))),
        (
            "avgpool2d",
            vec![wave(&[2, 6, 6], 1.1)],
            Box::new(|t, v| Ok(project(t, v[0].avgpool2d(2)?))),
        ),
        (
            "pixel_shuffle",
            vec![wave(&[8, 3, 3], 1.2)],
            Box::new(|t, v| Ok(project(t, v[0].pixel_shuffle(2)?))),
        ),
        (
            "grid_sample",
            vec![wave(&[2, 5, 6], 1.3)],
            Box::new(move |t, v| Ok(project(t, v[0].grid_sample(t.constant(grid.clone()))?))),
        ),
        (
            "cosine distance",
            vec![wave(&[3, 4, 4], 1.4), wave(&[3, 4, 4], 1.5)],
            Box::new(|_, v| Ok(v[0].cosine_distance(v[1])?.0)),
        ),
        (
            "mse",
            vec![wave(&[3, 4, 4], 1.6), wave(&[3, 4, 4], 1.7)],
            Box::new(|_, v| v[0].mse(v[1])),
        ),
    ]
}

fn relu_smooth(p: &[Tensor<f64>], m: &[Tensor<f64>]) -> bool {
    p[0].data().iter().zip(m[0].data()).all(|(a, b)| (*a > 0.0) == (*b > 0.0))
}

fn identity_crop() -> Result<(bool, String)> {
    let model = DCEModel::<f32>::new(small_config())?;
    let photo = Tensor::from_fn(&[3, 32, 32], |i| ((i * 37) % 101) as f32 / 100.0);
    let inf = model.infer(&photo)?;
    let same = inf.cropped == photo;
    Ok((same, format!("affine {:?}", inf.affines[0].0)))
}

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        input_size: 32,
        ..ModelConfig::default()
    };
    cfg.gamma = dce_core::model::GammaConfig::compact();
    cfg.head = dce_core::model::HeadConfig::for_features(cfg.gamma.feature_channels());
    cfg.enhancer = None;
    cfg
}

fn checkpoint_roundtrip() -> Result<(bool, String)> {
    let model = DCEModel::<f32>::new(small_config())?;
    let state = CheckpointState {
        model: model.config.clone(),
        train: None,
        rng: None,
    };
    let ckpt = Checkpoint::capture(&model, None, state, 0);
    let bytes = ckpt.to_bytes()?;
    let again = Checkpoint::from_bytes(&bytes)?.to_bytes()?;
    Ok((bytes == again, format!("{} bytes", bytes.len())))
}

fn metric_identities() -> Result<(bool, String)> {
    let img = ImageRGB::new(Tensor::from_fn(&[3, 24, 24], |i| ((i * 13) % 29) as f32 / 28.0))?;
    let (p, s, m) = (psnr(&img, &img)?, ssim(&img, &img)?, mse(&img, &img)?);
    Ok((p == 100.0 && (s - 1.0).abs() < 1e-12 && m == 0.0, format!("psnr {p}, ssim {s}, mse {m}")))
}

/// Print a result table and return whether every check passed.
pub fn run() -> bool {
    let mut rows: Vec<(String, bool, String)> = Vec::new();
    let cfg = GradCheckConfig::default();
    for (name, inputs, f) in grad_cases() {
        let res = if name == "relu" {
            check_gradients(&inputs, &f, relu_smooth, &cfg)
        } else {
            check_gradients(&inputs, &f, everywhere, &cfg)
        };
        rows.push(match res {
            Ok(r) => (
                format!("grad {name}"),
                r.max_rel_err <= GRAD_TOL,
                format!("{} probes, max rel err {:.2e}", r.probes, r.max_rel_err),
            ),
            Err(e) => (format!("grad {name}"), false, e.to_string()),
        });
    }
    let invariants: [(&str, fn() -> Result<(bool, String)>); 3] = [
        ("identity crop", identity_crop),
        ("checkpoint roundtrip", checkpoint_roundtrip),
        ("metric identities", metric_identities),
    ];
    for (name, check) in invariants {
        rows.push(match check() {
            Ok((ok, detail)) => (name.to_string(), ok, detail),
            Err(e) => (name.to_string(), false, e.to_string()),
        });
    }
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    for (name, ok, detail) in &rows {
        println!("{name:<width$}  {}  {detail}", if *ok { "ok  " } else { "FAIL" });
    }
    rows.iter().all(|r| r.1)
}
