//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Numeric arguments select criteria, e.g.
//! `cargo test --test acceptance -- 2 7`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dce_core::diffcore::init::split_seed;
use dce_core::diffcore::{avgpool_tensor, ImageRGB, Padding, Tape, Tensor, Var};
use dce_core::metrics::{mse, psnr, ssim};
use dce_core::model::{DCEModel, EnhancerConfig, ModelConfig};
use dce_core::synthgen::procedural::{background, foreground, gaussian_blur};
use dce_core::synthgen::{
    corner_error_px, generate_dataset, synth_sample, GenOptions, Manifest, SynthSample, TransformBounds,
};
use dce_core::train::{
    pretrain_enhancer, AdamConfig, Checkpoint, CheckpointState, PretrainConfig, TrainConfig, TrainSample, Trainer,
};
use dce_core::warp::{affine_grid, compose_affine, grid_sample, resize, AffineParams, Homography, MIN_DET, UNIT_CORNERS};
use dce_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

type ScalarFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>>;
type SmoothFn = Box<dyn Fn(&[Tensor<f64>], &[Tensor<f64>]) -> bool>;

struct GradCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: ScalarFn,
    smooth: SmoothFn,
}

/// Fixed non-trivial weights that turn an op output into a scalar.
fn project<'t>(t: &'t Tape<f64>, out: Var<'t, f64>) -> Var<'t, f64> {
    let w = Tensor::from_fn(&out.dims(), |i| (i as f64 * 1.37 + 0.4).sin());
    out.mul(t.constant(w)).unwrap().sum()
}

fn always() -> SmoothFn {
    Box::new(|_, _| true)
}

fn pixel_floor(v: f64, n: usize) -> f64 {
    ((v + 1.0) * (n - 1) as f64 / 2.0).floor()
}

fn grid_floors(a: &Tensor<f64>, h: usize, w: usize, src_h: usize, src_w: usize) -> Vec<f64> {
    let p = AffineParams::from_slice(a.data()).unwrap();
    let g = affine_grid::<f64>(&p, h, w).unwrap();
    let n = h * w;
    let c = g.coords().data();
    (0..n)
        .map(|i| pixel_floor(c[i], src_w))
        .chain((0..n).map(|i| pixel_floor(c[n + i], src_h)))
        .collect()
}

fn grad_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut cases = Vec::new();
    let conv = |name: &'static str, rng: &mut ChaCha8Rng, x: [usize; 3], w: [usize; 4], stride: usize, pad: Padding| {
        GradCase {
            name,
            inputs: vec![
                rand_tensor(rng, &x, -1.0, 1.0),
                rand_tensor(rng, &w, -1.0, 1.0),
                rand_tensor(rng, &[w[0]], -1.0, 1.0),
            ],
            f: Box::new(move |t, v| project(t, v[0].conv2d(v[1], v[2], stride, pad).unwrap())),
            smooth: always(),
        }
    };
    cases.push(conv("conv2d 3x3 same (c_out<=c_in)", rng, [4, 6, 7], [3, 4, 3, 3], 1, Padding::Same));
    cases.push(conv("conv2d 3x3 same (c_out>c_in)", rng, [2, 5, 6], [5, 2, 3, 3], 1, Padding::Same));
    cases.push(conv("conv2d 2x2 same", rng, [3, 5, 5], [4, 3, 2, 2], 1, Padding::Same));
    cases.push(conv("conv2d 1x1", rng, [3, 4, 4], [2, 3, 1, 1], 1, Padding::Valid));
    cases.push(conv("conv2d 3x3 valid stride 2", rng, [2, 7, 7], [3, 2, 3, 3], 2, Padding::Valid));
    cases.push(GradCase {
        name: "linear",
        inputs: vec![
            rand_tensor(rng, &[7], -1.0, 1.0),
            rand_tensor(rng, &[5, 7], -1.0, 1.0),
            rand_tensor(rng, &[5], -1.0, 1.0),
        ],
        f: Box::new(|t, v| project(t, v[0].linear(v[1], v[2]).unwrap())),
        smooth: always(),
    });
    let relu_in = Tensor::from_fn(&[40], |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen() {
            m
        } else {
            -m
        }
    });
    cases.push(GradCase {
        name: "relu",
        inputs: vec![relu_in],
        f: Box::new(|t, v| project(t, v[0].relu())),
        smooth: Box::new(|p, m| p[0].data().iter().zip(m[0].data()).all(|(a, b)| (*a > 0.0) == (*b > 0.0))),
    });
    cases.push(GradCase {
        name: "avgpool2d",
        inputs: vec![rand_tensor(rng, &[2, 6, 6], -1.0, 1.0)],
        f: Box::new(|t, v| project(t, v[0].avgpool2d(2).unwrap())),
        smooth: always(),
    });
    let argmax = |x: &Tensor<f64>| -> Vec<usize> {
        let d = x.data();
        let mut out = Vec::new();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let idx: Vec<usize> = (0..4).map(|k| (c * 6 + oy * 2 + k / 2) * 6 + ox * 2 + k % 2).collect();
                    out.push(*idx.iter().max_by(|&&a, &&b| d[a].total_cmp(&d[b])).unwrap());
                }
            }
        }
        out
    };
    cases.push(GradCase {
        name: "maxpool2d",
        inputs: vec![rand_tensor(rng, &[2, 6, 6], -1.0, 1.0)],
        f: Box::new(|t, v| project(t, v[0].maxpool2d(2).unwrap())),
        smooth: Box::new(move |p, m| argmax(&p[0]) == argmax(&m[0])),
    });
    cases.push(GradCase {
        name: "pixel_shuffle",
        inputs: vec![rand_tensor(rng, &[8, 3, 3], -1.0, 1.0)],
        f: Box::new(|t, v| project(t, v[0].pixel_shuffle(2).unwrap())),
        smooth: always(),
    });
    let affine = Tensor::new(
        vec![6],
        vec![
            0.8 + rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.2..0.2),
            0.8 + rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
        ],
    )
    .unwrap();
    let fixed_grid = affine_grid::<f64>(&AffineParams::from_slice(affine.data()).unwrap(), 6, 7)
        .unwrap()
        .into_tensor();
    cases.push(GradCase {
        name: "grid_sample wrt image",
        inputs: vec![rand_tensor(rng, &[2, 5, 6], 0.0, 1.0)],
        f: Box::new(move |t, v| project(t, v[0].grid_sample(t.constant(fixed_grid.clone())).unwrap())),
        smooth: always(),
    });
    let src = rand_tensor(rng, &[2, 5, 6], 0.0, 1.0);
    cases.push(GradCase {
        name: "grid_sample wrt affine",
        inputs: vec![affine],
        f: Box::new(move |t, v| {
            let grid = v[0].affine_grid(6, 7).unwrap();
            project(t, t.constant(src.clone()).grid_sample(grid).unwrap())
        }),
        smooth: Box::new(|p, m| grid_floors(&p[0], 6, 7, 5, 6) == grid_floors(&m[0], 6, 7, 5, 6)),
    });
    cases.push(GradCase {
        name: "cosine loss",
        inputs: vec![rand_tensor(rng, &[3, 4, 4], 0.0, 1.0), rand_tensor(rng, &[3, 4, 4], 0.0, 1.0)],
        f: Box::new(|_, v| v[0].cosine_distance(v[1]).unwrap().0),
        smooth: always(),
    });
    cases.push(GradCase {
        name: "MSE feature loss",
        inputs: vec![rand_tensor(rng, &[3, 4, 4], 0.0, 1.0), rand_tensor(rng, &[3, 4, 4], 0.0, 1.0)],
        f: Box::new(|_, v| v[0].mse(v[1]).unwrap()),
        smooth: always(),
    });
    cases
}

fn criterion_1() -> Outcome {
    const PROBES: usize = 100;
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-5;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for case in grad_cases(&mut rng) {
        let tape = Tape::new();
        let vars: Vec<_> = case.inputs.iter().map(|x| tape.param(x.clone())).collect();
        (case.f)(&tape, &vars).backward().unwrap();
        let grads: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&case.inputs)
            .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros_like(x)))
            .collect();
        let eval = |xs: &[Tensor<f64>]| {
            let tape = Tape::new();
            let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            (case.f)(&tape, &vars).item()
        };
        let total: usize = case.inputs.iter().map(Tensor::numel).sum();
        let (mut done, mut tries, mut max_err) = (0, 0, 0.0f64);
        while done < PROBES && tries < 20 * PROBES {
            tries += 1;
            let mut k = rng.gen_range(0..total);
            let mut which = 0;
            while k >= case.inputs[which].numel() {
                k -= case.inputs[which].numel();
                which += 1;
            }
            let (mut plus, mut minus) = (case.inputs.clone(), case.inputs.clone());
            plus[which].data_mut()[k] += EPS;
            minus[which].data_mut()[k] -= EPS;
            if !(case.smooth)(&plus, &minus) {
                continue;
            }
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let analytic = grads[which].data()[k];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            max_err = max_err.max(err);
            done += 1;
        }
        if done < PROBES || max_err > TOL {
            failures.push(format!("{} ({done} probes, rel err {max_err:.2e})", case.name));
        }
        if max_err >= worst.0 {
            worst = (max_err, case.name);
        }
    }
    let elapsed = t0.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    let detail = if failures.is_empty() {
        format!(
            "14 ops x {PROBES} probes, worst rel err {:.2e} ({}), {:.1}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        )
    } else {
        format!("failing: {}", failures.join(", "))
    };
    outcome(pass, detail)
}

// ---------------------------------------------------------------------------
// 2. STN exactness

fn criterion_2() -> Outcome {
    let model: DCEModel<f32> = DCEModel::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let photo = Tensor::from_fn(&[3, 224, 224], |_| rng.gen::<f32>());
    let inf = model.infer(&photo).unwrap();
    let identity = inf.affines[0] == AffineParams::IDENTITY;
    let exact = inf
        .cropped
        .data()
        .iter()
        .zip(photo.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(
        identity && exact,
        format!("affine {:?}, 224x224 crop bit-identical: {exact}", inf.affines[0].0),
    )
}

// ---------------------------------------------------------------------------
// 3. Warp composition

fn smoothed_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f32> {
    let noise: Vec<f32> = (0..3 * size * size).map(|_| rng.gen()).collect();
    Tensor::new(vec![3, size, size], gaussian_blur(&noise, 3, size, size, 2.0)).unwrap()
}

fn inside(p: (f64, f64), margin: f64) -> bool {
    p.0.abs() <= 1.0 - margin && p.1.abs() <= 1.0 - margin
}

fn criterion_3() -> Outcome {
    let size = 48;
    let step = 2.0 / (size - 1) as f64;
    let coord = |i: usize| i as f64 * step - 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // Integer-pixel translations.
    let mut exact = true;
    for _ in 0..20 {
        let img = smoothed_image(&mut rng, size);
        let (a, b) = (
            (rng.gen_range(-5i32..=5), rng.gen_range(-5i32..=5)),
            (rng.gen_range(-5i32..=5), rng.gen_range(-5i32..=5)),
        );
        let ta = AffineParams::translation(a.0 as f64 * step, a.1 as f64 * step);
        let tb = AffineParams::translation(b.0 as f64 * step, b.1 as f64 * step);
        let once = |t: &AffineParams, x: &Tensor<f32>| grid_sample(x, &affine_grid(t, size, size).unwrap()).unwrap();
        let twice = once(&tb, &once(&ta, &img));
        let composed = once(&compose_affine(&ta, &tb), &img);
        let ok_px = |v: i32| (0..size as i32).contains(&v);
        for y in 0..size as i32 {
            for x in 0..size as i32 {
                if !(ok_px(x + b.0) && ok_px(y + b.1) && ok_px(x + a.0 + b.0) && ok_px(y + a.1 + b.1)) {
                    continue;
                }
                for c in 0..3 {
                    let i = (c * size * size) + y as usize * size + x as usize;
                    exact &= twice.data()[i].to_bits() == composed.data()[i].to_bits();
                }
            }
        }
    }

    // Mild affines: resample twice versus once with the composed transform.
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let img = smoothed_image(&mut rng, size);
        let mild = |rng: &mut ChaCha8Rng| {
            let s = rng.gen_range(0.9..1.1);
            let th = rng.gen_range(-5f64..5.0).to_radians();
            let sh = rng.gen_range(-0.03..0.03);
            AffineParams([
                s * th.cos(),
                -s * th.sin() + sh,
                rng.gen_range(-0.05..0.05),
                s * th.sin(),
                s * th.cos(),
                rng.gen_range(-0.05..0.05),
            ])
        };
        let (a, b) = (mild(&mut rng), mild(&mut rng));
        let once = |t: &AffineParams, x: &Tensor<f32>| grid_sample(x, &affine_grid(t, size, size).unwrap()).unwrap();
        let twice = once(&b, &once(&a, &img));
        let ab = compose_affine(&a, &b);
        let composed = once(&ab, &img);
        let margin = 3.0 * step;
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..size {
            for x in 0..size {
                let p = (coord(x), coord(y));
                if !(inside(b.apply(p.0, p.1), margin) && inside(ab.apply(p.0, p.1), margin)) {
                    continue;
                }
                for c in 0..3 {
                    let i = c * size * size + y * size + x;
                    sum += (twice.data()[i] as f64 - composed.data()[i] as f64).abs();
                    n += 1;
                }
            }
        }
        worst = worst.max(sum / n as f64);
    }
    outcome(
        exact && worst <= 0.02,
        format!("integer translations exact: {exact}; worst mild-affine MAE {worst:.5} over 50 trials (limit 0.02)"),
    )
}

// ---------------------------------------------------------------------------
// 4 and 5. Desk-scale cropper convergence and the enhancer trend

const DESK: usize = 96;

fn desk_samples(base: u64, n: u64, bounds: &TransformBounds) -> Vec<SynthSample> {
    (0..n)
        .map(|i| {
            let s = split_seed(base, i);
            let fg = foreground(split_seed(s, 1), DESK * 2, 6);
            let bg = background(split_seed(s, 2), DESK);
            synth_sample(&fg, &bg, DESK, bounds, split_seed(s, 3)).unwrap()
        })
        .collect()
}

fn to_train(samples: &[SynthSample], with_hr: bool) -> Vec<TrainSample> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| TrainSample {
            id: i.to_string(),
            photo: s.photo.tensor().clone(),
            gt: s.gt.tensor().clone(),
            gt_hr: with_hr.then(|| s.gt_hr.tensor().clone()),
        })
        .collect()
}

fn desk_model(seed: u64, n_croppers: usize) -> ModelConfig {
    ModelConfig {
        input_size: DESK,
        enhancer: None,
        n_croppers,
        seed,
        ..ModelConfig::default()
    }
}

struct CropperRun {
    samples: Vec<SynthSample>,
    model: DCEModel<f32>,
    initial_lc: f64,
    final_lc: f64,
    elapsed: Duration,
}

/// The criterion-4 run, shared with criterion 5.
fn cropper_run() -> &'static CropperRun {
    static RUN: OnceLock<CropperRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let samples = desk_samples(1000, 232, &TransformBounds::similarity(0.6, 0.9, Some(0.2)));
        let steps = 2000;
        let cfg = TrainConfig {
            model: desk_model(0, 1),
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            batch_size: 8,
            max_steps: steps,
            seed: 0,
            eval_every: steps,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let mut trainer = Trainer::new(cfg, to_train(&samples[..200], false)).unwrap();
        trainer.run(None).unwrap();
        let elapsed = t0.elapsed();
        CropperRun {
            initial_lc: trainer.evals[0].1.cropper,
            final_lc: trainer.evals.last().unwrap().1.cropper,
            samples,
            model: trainer.model,
            elapsed,
        }
    })
}

fn criterion_4() -> Outcome {
    let run = cropper_run();
    let held_out = &run.samples[200..];
    let err = held_out
        .iter()
        .map(|s| {
            let a = run.model.infer(s.photo.tensor()).unwrap().affines[0];
            corner_error_px(&UNIT_CORNERS.map(|(x, y)| a.apply(x, y)), &s.placement.quad, DESK)
        })
        .sum::<f64>()
        / held_out.len() as f64;
    let ratio = run.final_lc / run.initial_lc;
    let pass = err <= 3.0 && ratio <= 0.5 && run.elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "held-out corner error {err:.3} px (limit 3), L_C {:.5} -> {:.5} (ratio {ratio:.3}, limit 0.5), {:.0}s",
            run.initial_lc,
            run.final_lc,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn psnr_t(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    psnr(&ImageRGB::from_clamped(a).unwrap(), &ImageRGB::from_clamped(b).unwrap()).unwrap()
}

fn criterion_5() -> Outcome {
    let run = cropper_run();
    let (train, test) = run.samples.split_at(200);
    let cropper_only = &run.model;

    let mut config = cropper_only.config.clone();
    config.enhancer = Some(EnhancerConfig {
        features: 16,
        blocks: 2,
        scale: 2,
        res_scale: 0.1,
    });
    let mut model: DCEModel<f32> = DCEModel::new(config).unwrap();
    for p in cropper_only.params.iter() {
        model.params.assign(&p.name, (*p.value).clone()).unwrap();
    }
    // Initialize the enhancer by super-resolution pretraining on the
    // cropper's outputs for the training photos.
    let pairs: Vec<_> = train
        .iter()
        .map(|s| (cropper_only.infer(s.photo.tensor()).unwrap().cropped, s.gt_hr.tensor().clone()))
        .collect();
    pretrain_enhancer(
        &mut model,
        &pairs,
        &PretrainConfig {
            steps: 1000,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    // End-to-end fine-tuning on L_C + L_E.
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 1e-5,
            ..AdamConfig::default()
        },
        batch_size: 8,
        max_steps: 100,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::with_model(cfg, model, to_train(train, true)).unwrap();
    trainer.run(None).unwrap();

    let (mut enhanced, mut bilinear) = (0.0, 0.0);
    for s in test {
        let e = trainer.model.infer(s.photo.tensor()).unwrap().enhanced.unwrap();
        enhanced += psnr_t(&avgpool_tensor(&e, 2), s.gt.tensor());
        let c = cropper_only.infer(s.photo.tensor()).unwrap().cropped;
        let up = resize(&c, 2 * DESK, 2 * DESK).unwrap();
        bilinear += psnr_t(&avgpool_tensor(&up, 2), s.gt.tensor());
    }
    let n = test.len() as f64;
    let (enhanced, bilinear) = (enhanced / n, bilinear / n);
    outcome(
        enhanced - bilinear >= 0.3,
        format!(
            "cropper+enhancer {enhanced:.3} dB vs cropper+bilinear {bilinear:.3} dB (gain {:.3}, limit 0.3)",
            enhanced - bilinear
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Stacked croppers on rotated placements

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_6() -> Outcome {
    let bounds = TransformBounds {
        scale_min: 0.6,
        scale_max: 0.9,
        rot_max_deg: 25.0,
        perspective_jitter: 0.0,
        translate_max: Some(0.2),
    };
    let mut per_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for seed in 0..3 {
        let samples = desk_samples(2000 + seed, 232, &bounds);
        for n in [1, 2] {
            let cfg = TrainConfig {
                model: desk_model(seed, n),
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                batch_size: 8,
                max_steps: 800,
                seed,
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(cfg, to_train(&samples[..200], false)).unwrap();
            trainer.run(None).unwrap();
            let test = &samples[200..];
            let s = test
                .iter()
                .map(|s| {
                    let c = trainer.model.infer(s.photo.tensor()).unwrap().cropped;
                    ssim(&ImageRGB::from_clamped(&c).unwrap(), &s.gt).unwrap()
                })
                .sum::<f64>()
                / test.len() as f64;
            per_n.entry(n).or_default().push(s);
        }
    }
    let (one, two) = (median(per_n[&1].clone()), median(per_n[&2].clone()));
    outcome(
        two >= one - 0.01,
        format!(
            "median SSIM 1 cropper {one:.4} {:?}, 2 croppers {two:.4} {:?}",
            per_n[&1].iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            per_n[&2].iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Metrics

/// SSIM evaluated window by window with the 2-D Gaussian weights.
fn ssim_oracle(a: &ImageRGB, b: &ImageRGB) -> f64 {
    let (h, w) = (a.height(), a.width());
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..3 {
        let px = |img: &ImageRGB, y: usize, x: usize| img.tensor().data()[(c * h + y) * w + x] as f64;
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i] * g[j] / (gs * gs);
                        let (p, q) = (px(a, y0 + i, x0 + j), px(b, y0 + i, x0 + j));
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / 3.0
}

fn criterion_7() -> Outcome {
    let mut notes = Vec::new();
    let zero = ImageRGB::filled(16, 16, [0.0; 3]);
    let tenth = ImageRGB::filled(16, 16, [0.1; 3]);
    let p = psnr(&zero, &tenth).unwrap();
    let psnr_ok = (p - 20.0).abs() <= 1e-6;
    notes.push(format!("PSNR(0, 0.1) = {p:.9}"));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rand_img = |h: usize, w: usize| {
        ImageRGB::new(Tensor::from_fn(&[3, h, w], |_| rng.gen::<f32>())).unwrap()
    };
    let mut ident_err = 0.0f64;
    for _ in 0..10 {
        let a = rand_img(24, 20);
        ident_err = ident_err.max((ssim(&a, &a).unwrap() - 1.0).abs());
    }
    let mut oracle_err = 0.0f64;
    for _ in 0..10 {
        let a = rand_img(16, 16);
        let noise = rand_img(16, 16);
        let b = ImageRGB::from_clamped(&Tensor::from_fn(&[3, 16, 16], |i| {
            0.7 * a.tensor().data()[i] + 0.3 * noise.tensor().data()[i]
        }))
        .unwrap();
        oracle_err = oracle_err.max((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
    }
    let mut mse_ok = true;
    for _ in 0..200 {
        let (a, b) = (rand_img(12, 12), rand_img(12, 12));
        let m = mse(&a, &b).unwrap();
        mse_ok &= (0.0..=1.0).contains(&m);
    }
    mse_ok &= mse(&zero, &ImageRGB::filled(16, 16, [1.0; 3])).unwrap() == 1.0;
    notes.push(format!("SSIM(I,I) err {ident_err:.1e}, oracle err {oracle_err:.1e}, MSE in [0,1]: {mse_ok}"));
    outcome(
        psnr_ok && ident_err <= 1e-6 && oracle_err <= 1e-6 && mse_ok,
        notes.join("; "),
    )
}

// ---------------------------------------------------------------------------
// 8. Generator properties

fn write_sources(dir: &Path) {
    let (fg, bg) = (dir.join("fg"), dir.join("bg"));
    fs::create_dir_all(&fg).unwrap();
    fs::create_dir_all(&bg).unwrap();
    for i in 0..4 {
        foreground(100 + i, 256, 5).save_png(fg.join(format!("fg{i}.png"))).unwrap();
        background(200 + i, 160).save_png(bg.join(format!("bg{i}.png"))).unwrap();
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    write_sources(tmp.path());
    let opts = GenOptions {
        n: 1000,
        seed: 8,
        ..GenOptions::default()
    };
    let (fg, bg) = (tmp.path().join("fg"), tmp.path().join("bg"));
    let (out_a, out_b) = (tmp.path().join("a"), tmp.path().join("b"));
    let manifest = generate_dataset(&opts, &fg, &bg, &out_a).unwrap();
    generate_dataset(&opts, &fg, &bg, &out_b).unwrap();

    let (mut invertible, mut inside_all, mut scale_ok) = (0, 0, 0);
    for rec in &manifest.records {
        let Ok(h) = Homography::new(rec.homography.unwrap()) else { continue };
        let Ok(inv) = h.inverse() else { continue };
        if h.det().abs() > MIN_DET {
            invertible += 1;
        }
        if let Some(q) = inv.corners() {
            if q.iter().all(|&(x, y)| x.abs() <= 1.0 + 1e-9 && y.abs() <= 1.0 + 1e-9) {
                inside_all += 1;
            }
        }
        let s = rec.fg_scale.unwrap();
        if (0.5..=0.8).contains(&s) {
            scale_ok += 1;
        }
    }
    let reloaded = Manifest::load(out_a.join("manifest.jsonl")).unwrap().len();
    let identical = dir_bytes(&out_a) == dir_bytes(&out_b);
    let n = manifest.len();
    outcome(
        n == 1000 && reloaded == 1000 && invertible == n && inside_all == n && scale_ok == n && identical,
        format!(
            "{n} samples: invertible {invertible}, quads inside {inside_all}, fg_scale in [0.5,0.8] {scale_ok}, regeneration byte-identical: {identical}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Serialization

fn small_config(n_croppers: usize) -> ModelConfig {
    ModelConfig {
        input_size: 64,
        n_croppers,
        enhancer: Some(EnhancerConfig {
            features: 8,
            blocks: 2,
            scale: 2,
            res_scale: 0.1,
        }),
        seed: 9,
        ..ModelConfig::default()
    }
}

fn random_sample(rng: &mut ChaCha8Rng, size: usize) -> TrainSample {
    TrainSample {
        id: "x".into(),
        photo: Tensor::from_fn(&[3, size, size], |_| rng.gen()),
        gt: Tensor::from_fn(&[3, size, size], |_| rng.gen()),
        gt_hr: Some(Tensor::from_fn(&[3, 2 * size, 2 * size], |_| rng.gen())),
    }
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = vec![random_sample(&mut rng, 64), random_sample(&mut rng, 64)];
    let cfg = TrainConfig {
        model: small_config(1),
        batch_size: 2,
        max_steps: 2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, data).unwrap();
    trainer.run(None).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (p1, p2) = (tmp.path().join("a.dcec"), tmp.path().join("b.dcec"));
    trainer.checkpoint().save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    let (b1, b2) = (fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    let identical = b1 == b2;

    // Header, read independently of the loader.
    let count = u32::from_le_bytes(b1[8..12].try_into().unwrap()) as usize;
    let header_ok = &b1[..4] == b"DCEC" && u32::from_le_bytes(b1[4..8].try_into().unwrap()) == 1;
    let expected_count = trainer.model.params.len() + 2 * trainer.model.params.iter().filter(|p| p.trainable).count();

    let mut bad_magic = b1.clone();
    bad_magic[..4].copy_from_slice(b"NOPE");
    let magic_err = matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Format(m)) if m.contains("DCEC"));
    let mut bad_version = b1.clone();
    bad_version[4..8].copy_from_slice(&7u32.to_le_bytes());
    let version_err = matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Version { found: 7, .. }));
    let truncated = [0usize, 3, 11, 100, b1.len() / 3, b1.len() - 9, b1.len() - 1]
        .iter()
        .all(|&cut| matches!(Checkpoint::from_bytes(&b1[..cut]), Err(Error::Truncated(_))));
    let mut huge = b1.clone();
    // Rank byte of the first tensor follows its name.
    let name_len = u16::from_le_bytes(huge[12..14].try_into().unwrap()) as usize;
    let dims_at = 14 + name_len + 1;
    huge[dims_at..dims_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    let overflow_named = Checkpoint::from_bytes(&huge).is_err();
    let state_ok = matches!(
        loaded.state,
        CheckpointState {
            train: Some(_),
            rng: Some(_),
            ..
        }
    ) && loaded.step == 2;
    let pass = identical && header_ok && count == expected_count && magic_err && version_err && truncated && overflow_named && state_ok;
    outcome(
        pass,
        format!(
            "{} bytes, {count} tensors; save-load-save identical: {identical}; bad magic/version/truncation/huge dims rejected: {magic_err}/{version_err}/{truncated}/{overflow_named}",
            b1.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Gradient reach

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sample = random_sample(&mut rng, 64);
    let mut model: DCEModel<f32> = DCEModel::new(small_config(2)).unwrap();

    let group_norms = |model: &DCEModel<f32>, depth: usize| -> BTreeMap<String, f64> {
        let targets = model.target_features(&sample.gt, sample.gt_hr.as_ref()).unwrap();
        let tape = Tape::new();
        let p = model.bind(&tape);
        let out = model.forward(&p, tape.constant(sample.photo.clone()), None).unwrap();
        model.total_loss(&p, &out, &targets).unwrap().total.backward().unwrap();
        let mut norms = BTreeMap::new();
        for (param, g) in model.params.iter().zip(p.grads()) {
            if !param.trainable {
                continue;
            }
            let group: Vec<&str> = param.name.split('.').collect();
            let key = group[..depth.min(group.len() - 1)].join(".");
            let sq = g.map(|g| g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).unwrap_or(0.0);
            *norms.entry(key).or_insert(0.0) += sq;
        }
        norms
    };

    // At initialization: per network (cropper1, cropper2, enhancer).
    let init = group_norms(&model, 1);
    let init_ok = init.len() == 3 && init.values().all(|&v| v > 0.0);

    // Away from the identity initialization every layer is reached.
    for name in ["cropper1.fc3.weight", "cropper2.fc3.weight"] {
        let id = model.params.find(name).unwrap();
        let v = model.params.value_mut(id);
        v.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1e-3..1e-3));
    }
    let layers = group_norms(&model, usize::MAX);
    let dead: Vec<&String> = layers.iter().filter(|(_, &v)| v <= 0.0).map(|(k, _)| k).collect();
    let gamma_frozen = model.params.iter().filter(|p| p.name.starts_with("gamma.")).all(|p| !p.trainable);
    outcome(
        init_ok && dead.is_empty() && gamma_frozen,
        format!(
            "at init: {}; {} trainable layers after perturbing fc3, unreached: {dead:?}",
            init.iter().map(|(k, v)| format!("{k} {:.2e}", v.sqrt())).collect::<Vec<_>>().join(", "),
            layers.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", criterion_1),
        (2, "STN exactness", criterion_2),
        (3, "warp composition", criterion_3),
        (4, "desk-scale cropper convergence", criterion_4),
        (5, "enhancer trend", criterion_5),
        (6, "stacked-cropper trend", criterion_6),
        (7, "metric correctness", criterion_7),
        (8, "generator properties", criterion_8),
        (9, "serialization", criterion_9),
        (10, "end-to-end gradient reach", criterion_10),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {} {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
