//! Single-file checkpoints.
//!
//! ```text
//! b"RANLENCK" | u32 version | u64 header length | JSON header | f32 LE blobs
//! ```
//!
//! The header embeds the model and training configuration, progress
//! counters, the RNG state, and a manifest mapping each parameter name to
//! its shape and position in the blob section.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"RANLENCK";
pub const VERSION: u32 = 1;
/// Refuse headers larger than this, to fail fast on garbage input.
const MAX_HEADER: u64 = 64 << 20;

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand_chacha::rand_core::SeedableRng;
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Offset in elements from the start of the blob section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub step: usize,
    #[serde(default)]
    pub rng: Option<RngState>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub step: usize,
    pub rng: Option<RngState>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape(),
                offset,
            });
            offset += t.numel();
        }
        let header = CheckpointHeader {
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse only the header (cheap; used for listing models).
    pub fn read_header(mut r: impl Read) -> Result<CheckpointHeader> {
        let mut fixed = [0u8; 20];
        r.read_exact(&mut fixed)
            .map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &fixed[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(fixed[12..20].try_into().unwrap());
        if len > MAX_HEADER {
            return Err(Error::Checkpoint("header too large".into()));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let header = Self::read_header(&mut cursor)?;
        let blob = cursor;
        if blob.len() % 4 != 0 {
            return Err(Error::Checkpoint("blob section is not a whole number of f32".into()));
        }
        let (_, mut params) = Model::skeleton::<f32>(header.model.clone())?;
        if params.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "model expects {} tensors, checkpoint has {}",
                params.len(),
                header.tensors.len()
            )));
        }
        for entry in &header.tensors {
            let id = params
                .find(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
            let slot = params.get_mut(id);
            if slot.shape() != entry.shape {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} but model expects {:?}",
                    entry.name,
                    entry.shape,
                    slot.shape()
                )));
            }
            let start = entry.offset * 4;
            let end = start + slot.numel() * 4;
            let raw = blob
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("{}: data out of range", entry.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *slot = Tensor::from_vec(entry.shape, values);
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(Error::file(path))?;
        f.write_all(&bytes).map_err(Error::file(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(Error::file(path))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuild the model structure for these weights.
    pub fn model(&self) -> Result<Model> {
        Ok(Model::skeleton::<f32>(self.model.clone())?.0)
    }
}
