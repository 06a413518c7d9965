//! Binary checkpoints.
//!
//! Layout (little-endian): magic `DCEC`, u32 version, u32 tensor count, then
//! per tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims and raw
//! f32 data; then a u64 step counter, and finally a state blob (u32 length
//! followed by UTF-8 JSON holding the configuration and RNG state).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::TrainConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{DCEModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"DCEC";
pub const VERSION: u32 = 1;

/// Prefixes of the Adam moment tensors stored next to the parameters.
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// 128-bit word position, split into high and low halves.
    pub word_pos: [u64; 2],
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: [(pos >> 64) as u64, pos as u64],
        }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos[0] as u128) << 64) | self.word_pos[1] as u128);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub rng: Option<RngState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub step: u64,
    pub state: CheckpointState,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank of {name}")))?;
            out.push(rank);
            for &d in t.dims() {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim of {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        let blob = serde_json::to_vec(&self.state)?;
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                std::str::from_utf8(MAGIC).unwrap()
            )));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = r.u8(&name)? as usize;
            let mut dims = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u32(&name)? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("dims of {name} overflow")))?;
                dims.push(d);
            }
            let bytes = numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format(format!("dims of {name} overflow")))?;
            let raw = r.take(bytes, &name)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        let step = r.u64("step counter")?;
        let blob_len = r.u32("state length")? as usize;
        let state = serde_json::from_slice(r.take(blob_len, "state")?)
            .map_err(|e| Error::Format(format!("state: {e}")))?;
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { tensors, step, state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Snapshot of a model's parameters and (optionally) optimizer moments.
    pub fn capture(model: &DCEModel<f32>, adam: Option<&Adam<f32>>, state: CheckpointState, step: u64) -> Self {
        let mut tensors: Vec<_> = model.params.iter().map(|p| (p.name.clone(), (*p.value).clone())).collect();
        if let Some(adam) = adam {
            for (p, slot) in model.params.iter().zip(&adam.moments) {
                if let Some((m, v)) = slot {
                    tensors.push((format!("{ADAM_M}{}", p.name), m.clone()));
                    tensors.push((format!("{ADAM_V}{}", p.name), v.clone()));
                }
            }
        }
        Self { tensors, step, state }
    }

    /// Rebuild the model described by the stored configuration.
    pub fn to_model(&self) -> Result<DCEModel<f32>> {
        let mut model = DCEModel::new(self.state.model.clone())?;
        let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let t = self.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            model.params.assign(&name, t.clone())?;
        }
        Ok(model)
    }

    /// Restore optimizer moments for `model` into `adam`; absent moments
    /// stay zero.
    pub fn restore_moments(&self, model: &DCEModel<f32>, adam: &mut Adam<f32>) -> Result<()> {
        adam.t = self.step;
        for (p, slot) in model.params.iter().zip(adam.moments.iter_mut()) {
            let Some((m, v)) = slot else { continue };
            if let (Some(sm), Some(sv)) = (
                self.get(&format!("{ADAM_M}{}", p.name)),
                self.get(&format!("{ADAM_V}{}", p.name)),
            ) {
                if sm.dims() != m.dims() || sv.dims() != v.dims() {
                    return Err(Error::dims("restore moments", format!("{:?}", m.dims()), sm.dims()));
                }
                *m = sm.clone();
                *v = sv.clone();
            }
        }
        Ok(())
    }
}

/// Copy every `gamma.*` tensor of `ckpt` into `model`; returns the number
/// of tensors imported.
pub fn import_gamma(model: &mut DCEModel<f32>, ckpt: &Checkpoint) -> Result<usize> {
    let names: Vec<String> = model
        .params
        .iter()
        .filter(|p| p.name.starts_with("gamma."))
        .map(|p| p.name.clone())
        .collect();
    for name in &names {
        let t = ckpt.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        model.params.assign(name, t.clone())?;
    }
    Ok(names.len())
}
