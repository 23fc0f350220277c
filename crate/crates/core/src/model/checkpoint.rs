//! Binary checkpoint: a little-endian tensor table followed by a JSON
//! trailer with the config, RNG state and stage history.
//!
//! ```text
//! "ALIGNCKP" | version u32 | entries u32
//! per entry: name_len u32 | name | dtype u8 | rank u32 | dims u64*rank | payload
//! trailer_len u64 | trailer JSON
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, Model, ModelConfig, ModelError, StageConfig, TrainState};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ALIGNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal string (u128 does not survive every JSON reader).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, ModelError> {
        use rand::SeedableRng;
        let bad = || ModelError::Format(format!("malformed RNG state {:?}", self.seed));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config: StageConfig,
    pub steps: usize,
    /// Batches consumed, counting skipped ones.
    pub cursor: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub above: usize,
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub rng: Option<RngState>,
    pub stages: Vec<StageRecord>,
    pub adam_step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub adam: Option<AdamState<T>>,
    pub meta: CheckpointMeta,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            ModelError::Format(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn write_entry<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let mut entries: Vec<(String, &Tensor<T>)> = self
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, _, t)| (n, t))
            .collect();
        if let Some(adam) = &self.adam {
            for ((name, m), v) in adam.names.iter().zip(&adam.m).zip(&adam.v) {
                entries.push((format!("{ADAM_M}{name}"), m));
                entries.push((format!("{ADAM_V}{name}"), v));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, entries.len() as u32);
        for (name, t) in &entries {
            write_entry(&mut out, name, t);
        }
        let trailer = serde_json::to_vec(&self.meta).map_err(|e| ModelError::Format(e.to_string()))?;
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(ModelError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let count = r.u32("entry count")? as usize;
        let mut table: HashMap<String, Tensor<T>> = HashMap::with_capacity(count);
        let mut order = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| ModelError::Format("entry name is not UTF-8".into()))?;
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| ModelError::Format(format!("unknown dtype tag {tag} for {name}")))?;
            if dtype != T::DTYPE {
                return Err(ModelError::Format(format!(
                    "entry {name} stores {dtype:?}, loader expects {:?}",
                    T::DTYPE
                )));
            }
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| ModelError::Format(format!("entry {name} has an overflowing shape")))?;
            let size = dtype.size();
            let payload = r.take(n.checked_mul(size).unwrap_or(usize::MAX), &name)?;
            let data = payload.chunks_exact(size).map(T::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| ModelError::Format(e.to_string()))?;
            if table.insert(name.clone(), t).is_some() {
                return Err(ModelError::Format(format!("duplicate entry {name}")));
            }
            order.push(name);
        }
        let tlen = r.u64("trailer length")? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(tlen, "trailer")?).map_err(|e| ModelError::Format(format!("trailer: {e}")))?;
        if r.pos != bytes.len() {
            return Err(ModelError::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }

        let mut model = Model::<T>::init(&meta.model, meta.init_seed)?;
        let mut names = Vec::new();
        for (name, _, slot) in model.named_tensors_mut() {
            let t = table
                .remove(&name)
                .ok_or_else(|| ModelError::Format(format!("checkpoint is missing {name}")))?;
            if t.shape() != slot.shape() {
                return Err(ModelError::Format(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            names.push(name);
        }
        let adam = if table.is_empty() {
            None
        } else {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for name in &names {
                m.push(
                    table
                        .remove(&format!("{ADAM_M}{name}"))
                        .ok_or_else(|| ModelError::Format(format!("optimizer state is missing {name}")))?,
                );
                v.push(
                    table
                        .remove(&format!("{ADAM_V}{name}"))
                        .ok_or_else(|| ModelError::Format(format!("optimizer state is missing {name}")))?,
                );
            }
            let mut state = AdamState::new(model.named_tensors().into_iter().map(|(n, _, t)| (n, t)));
            state.m = m;
            state.v = v;
            state.step = meta.adam_step;
            Some(state)
        };
        if let Some(extra) = order.iter().find(|n| table.contains_key(*n)) {
            return Err(ModelError::Format(format!("unexpected entry {extra}")));
        }
        Ok(Checkpoint { model, adam, meta })
    }

    /// Optimizer position of an unfinished last stage, if any.
    pub fn train_state(&self) -> Option<(StageConfig, TrainState<T>)> {
        let rec = self.meta.stages.last().filter(|r| !r.complete)?;
        Some((
            rec.config.clone(),
            TrainState {
                adam: self.adam.clone()?,
                cursor: rec.cursor,
                step: rec.steps,
                initial_loss: rec.first_loss,
                above: rec.above,
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
