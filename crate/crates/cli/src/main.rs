use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dce_core::diffcore::{avgpool_tensor, ImageRGB};
use dce_core::metrics::{evaluate_pairs, MetricReport};
use dce_core::model::{DCEModel, ModelConfig};
use dce_core::synthgen::{generate_dataset, GenOptions, Manifest, TransformBounds, MANIFEST_NAME};
use dce_core::train::{train_loop, AdamConfig, Checkpoint, TrainConfig, FINAL_CHECKPOINT, LOSS_CSV};
use dce_core::warp::resize;

mod selftest;

/// Crop an embedded image out of a photo and enhance it.
#[derive(Parser, Debug)]
#[command(name = "dce", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of composited photos.
    Gen(GenArgs),
    /// Train croppers (and the enhancer) on a manifest.
    Train(TrainArgs),
    /// Compute PSNR/SSIM/MSE of model outputs against ground truth.
    Eval(EvalArgs),
    /// Run a checkpoint on one photo.
    Infer(InferArgs),
    /// Run gradient checks and invariant checks.
    Selftest,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    fg_dir: PathBuf,
    #[arg(long)]
    bg_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    scale_min: f64,
    #[arg(long, default_value_t = 0.8)]
    scale_max: f64,
    /// Largest rotation in degrees.
    #[arg(long, default_value_t = 25.0)]
    rot_max: f64,
    /// Largest corner displacement as a fraction of the foreground side.
    #[arg(long, default_value_t = 0.05)]
    persp_jitter: f64,
    /// Side of the photo and ground truth in pixels.
    #[arg(long, default_value_t = 224)]
    size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    croppers: usize,
    #[arg(long)]
    no_enhancer: bool,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Checkpoint to take the feature extractor weights from.
    #[arg(long)]
    import_gamma: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Without a checkpoint the photos themselves are scored.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Side length to score at: the base resolution or the enhancer's.
    #[arg(long, default_value_t = 224)]
    resolution: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Op(dce_core::Error),
    Checks,
}

impl From<dce_core::Error> for Failure {
    fn from(e: dce_core::Error) -> Self {
        Failure::Op(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Op(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var("DCE_THREADS") else {
        return Ok(());
    };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => return Err(Failure::Usage(format!("DCE_THREADS must be a positive integer, got {v:?}"))),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size the thread pool: {e}")))
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let opts = GenOptions {
        n: a.n,
        seed: a.seed,
        bounds: TransformBounds {
            scale_min: a.scale_min,
            scale_max: a.scale_max,
            rot_max_deg: a.rot_max,
            perspective_jitter: a.persp_jitter,
            translate_max: None,
        },
        size: a.size,
    };
    let manifest = generate_dataset(&opts, &a.fg_dir, &a.bg_dir, &a.out)?;
    println!("{} ({} samples)", a.out.join(MANIFEST_NAME).display(), manifest.len());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut model = ModelConfig {
        n_croppers: a.croppers,
        seed: a.seed,
        ..ModelConfig::default()
    };
    if a.no_enhancer {
        model.enhancer = None;
    }
    let config = TrainConfig {
        model,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        batch_size: a.batch,
        max_steps: a.steps,
        seed: a.seed,
        import_gamma: a.import_gamma.map(|p| p.to_string_lossy().into_owned()),
        ..TrainConfig::default()
    };
    let manifest = Manifest::load(&a.manifest)?;
    let outcome = train_loop(&config, &manifest, &a.out)?;
    if let Some(last) = outcome.history.last() {
        println!("step {}: loss {:.6} (L_C {:.6})", last.step, last.total, last.cropper);
    }
    println!("{}", a.out.join(FINAL_CHECKPOINT).display());
    println!("{}", a.out.join(LOSS_CSV).display());
    Ok(())
}

/// Model output for one photo at `resolution`, or the photo itself without
/// a model.
fn eval_output(model: Option<&DCEModel<f32>>, photo: &ImageRGB, resolution: usize) -> dce_core::Result<ImageRGB> {
    let Some(model) = model else {
        if photo.height() == resolution && photo.width() == resolution {
            return Ok(photo.clone());
        }
        return ImageRGB::from_clamped(&resize(photo.tensor(), resolution, resolution)?);
    };
    let s = model.input_size();
    if photo.height() != s || photo.width() != s {
        return Err(dce_core::Error::Dataset(format!(
            "photo is {}x{} but the model takes {s}x{s}",
            photo.height(),
            photo.width()
        )));
    }
    let inf = model.infer(photo.tensor())?;
    let r = model.config.upscale();
    let out = match inf.enhanced {
        Some(e) if resolution == s => avgpool_tensor(&e, r),
        Some(e) => e,
        None => resize(&inf.cropped, resolution, resolution)?,
    };
    ImageRGB::from_clamped(&out)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let manifest = Manifest::load(&a.manifest)?;
    let model = a
        .checkpoint
        .as_ref()
        .map(|p| Checkpoint::load(p).and_then(|c| c.to_model()))
        .transpose()?;
    let samples = manifest.load_all()?;
    let base = samples[0].gt.height();
    let high = match &model {
        Some(m) => m.input_size() * m.config.upscale(),
        None => samples[0].gt_hr.as_ref().map_or(2 * base, |hr| hr.height()),
    };
    if a.resolution != base && a.resolution != high {
        return Err(Failure::Usage(format!(
            "--resolution must be {base} (base) or {high} (high resolution), got {}",
            a.resolution
        )));
    }
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let target = if a.resolution == base {
            s.gt
        } else {
            s.gt_hr.ok_or_else(|| {
                dce_core::Error::Dataset(format!("sample {} has no high-resolution target", s.record.id))
            })?
        };
        let output = eval_output(model.as_ref(), &s.photo, a.resolution)?;
        pairs.push((s.record.id, output, target));
    }
    let report: MetricReport = evaluate_pairs(a.resolution, &pairs)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, report.to_json()?)?;
    print!("{}", report.table());
    Ok(())
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    let mut photo = ImageRGB::load_png(&a.input)?;
    let s = model.input_size();
    if photo.height() != s || photo.width() != s {
        log::info!("resizing {}x{} input to {s}x{s}", photo.height(), photo.width());
        photo = ImageRGB::from_clamped(&resize(photo.tensor(), s, s)?)?;
    }
    let inf = model.infer(photo.tensor())?;
    fs::create_dir_all(&a.out)?;
    ImageRGB::from_clamped(&inf.cropped)?.save_png(a.out.join("cropped.png"))?;
    match &inf.enhanced {
        Some(e) => ImageRGB::from_clamped(e)?.save_png(a.out.join("enhanced.png"))?,
        None => log::info!("checkpoint has no enhancer; enhanced.png not written"),
    }
    let affines: Vec<[f64; 6]> = inf.affines.iter().map(|p| p.0).collect();
    fs::write(a.out.join("affine.json"), serde_json::to_string_pretty(&affines).map_err(dce_core::Error::from)?)?;
    println!("{}", a.out.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Selftest => {
            if selftest::run() {
                Ok(())
            } else {
                Err(Failure::Checks)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Op(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Checks) => ExitCode::from(1),
    }
}
