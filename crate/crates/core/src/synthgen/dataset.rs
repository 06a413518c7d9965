use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{synth_sample, SynthSample, TransformBounds};
use crate::diffcore::init::split_seed;
use crate::diffcore::ImageRGB;
use crate::error::{Error, Result};
use crate::warp::Homography;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub photo_path: String,
    pub gt_path: String,
    pub gt_hr_path: Option<String>,
    /// Row-major photo-to-foreground map; `null` for collected photos.
    pub homography: Option<[f64; 9]>,
    pub fg_scale: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<SampleRecord>,
}

#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub record: SampleRecord,
    pub photo: ImageRGB,
    pub gt: ImageRGB,
    pub gt_hr: Option<ImageRGB>,
}

impl LoadedSample {
    pub fn homography(&self) -> Result<Option<Homography>> {
        self.record.homography.map(Homography::new).transpose()
    }
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::Dataset(format!("{} lists no samples", path.display())));
        }
        Ok(Self {
            dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn load_sample(&self, index: usize) -> Result<LoadedSample> {
        let record = self.records[index].clone();
        let photo = ImageRGB::load_png(self.resolve(&record.photo_path))?;
        let gt = ImageRGB::load_png(self.resolve(&record.gt_path))?;
        let gt_hr = record
            .gt_hr_path
            .as_deref()
            .map(|p| ImageRGB::load_png(self.resolve(p)))
            .transpose()?;
        Ok(LoadedSample {
            record,
            photo,
            gt,
            gt_hr,
        })
    }

    /// Every sample, or the list of ids that failed to load.
    pub fn load_all(&self) -> Result<Vec<LoadedSample>> {
        let loaded: Vec<_> = (0..self.len()).into_par_iter().map(|i| self.load_sample(i)).collect();
        let mut out = Vec::with_capacity(loaded.len());
        let mut missing = Vec::new();
        for (rec, r) in self.records.iter().zip(loaded) {
            match r {
                Ok(s) => out.push(s),
                Err(e) => missing.push(format!("{}: {e}", rec.id)),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Dataset(format!("unreadable samples: {}", missing.join("; "))));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub n: usize,
    pub seed: u64,
    pub bounds: TransformBounds,
    /// Side of the photo and ground truth; the high-resolution target is 2×.
    pub size: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            n: 1,
            seed: 0,
            bounds: TransformBounds::default(),
            size: 224,
        }
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", dir.display())));
    }
    Ok(files)
}

/// Load `files[start]`, moving on to the next file (cyclically) when one
/// cannot be decoded.
fn load_from(files: &[PathBuf], start: usize) -> Result<ImageRGB> {
    for k in 0..files.len() {
        let path = &files[(start + k) % files.len()];
        match ImageRGB::load_png(path) {
            Ok(img) => return Ok(img),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Err(Error::Dataset("no readable images".into()))
}

/// Write the three images of `sample` under `out_dir` and return its record.
pub fn write_sample(out_dir: &Path, id: &str, sample: &SynthSample) -> Result<SampleRecord> {
    let names = [format!("{id}_photo.png"), format!("{id}_gt.png"), format!("{id}_gt2x.png")];
    sample.photo.save_png(out_dir.join(&names[0]))?;
    sample.gt.save_png(out_dir.join(&names[1]))?;
    sample.gt_hr.save_png(out_dir.join(&names[2]))?;
    let [photo_path, gt_path, gt_hr_path] = names;
    Ok(SampleRecord {
        id: id.to_string(),
        photo_path,
        gt_path,
        gt_hr_path: Some(gt_hr_path),
        homography: Some(*sample.placement.homography.as_array()),
        fg_scale: Some(sample.placement.fg_scale),
        seed: Some(sample.seed),
    })
}

pub fn sample_id(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(6);
    format!("{i:0width$}")
}

/// Generate `opts.n` samples from the PNG images in `fg_dir` and `bg_dir`
/// into `out_dir`, writing `manifest.jsonl` there.
pub fn generate_dataset(opts: &GenOptions, fg_dir: &Path, bg_dir: &Path, out_dir: &Path) -> Result<Manifest> {
    if opts.n == 0 {
        return Err(Error::invalid("generate", "n must be at least 1"));
    }
    if opts.size < 2 {
        return Err(Error::invalid("generate", format!("image size {} too small", opts.size)));
    }
    opts.bounds.validate()?;
    let fgs = list_images(fg_dir)?;
    let bgs = list_images(bg_dir)?;
    fs::create_dir_all(out_dir)?;
    let records = (0..opts.n)
        .into_par_iter()
        .map(|i| {
            let seed = split_seed(opts.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fg = load_from(&fgs, rng.gen_range(0..fgs.len()))?;
            let bg = load_from(&bgs, rng.gen_range(0..bgs.len()))?;
            let sample = synth_sample(&fg, &bg, opts.size, &opts.bounds, split_seed(seed, 1))?;
            let sample = SynthSample { seed, ..sample };
            write_sample(out_dir, &sample_id(i, opts.n), &sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        dir: out_dir.to_path_buf(),
        records,
    };
    manifest.save(out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
