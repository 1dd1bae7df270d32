//! Versioned binary checkpoint container.
//!
//! ```text
//! magic "VOLCAMCK" | u32 version
//! u64 length + JSON metadata (descriptor, config, history, schedule, RNG, epoch)
//! tensor tables: params, buffers, adam m, adam v, best params, best buffers
//! SHA-256 of everything above
//! ```
//! Each table is a u32 entry count followed by entries of
//! `u32 name length | name | u32 rank | u64 dims | f32 little-endian data`.
//! Integers are little-endian.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Descriptor, LayerGraph};
use crate::tensor::Tensor;
use crate::train::adam::{AdamHyper, AdamState};
use crate::train::schedule::PlateauMonitor;
use crate::train::session::{BestSnapshot, EpochRecord, TrainSession};
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VOLCAMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Meta {
    descriptor: Descriptor,
    config: TrainConfig,
    history: Vec<EpochRecord>,
    monitor: PlateauMonitor,
    stopped: bool,
    adam: AdamHyper,
    adam_step: u64,
    /// Per-epoch shuffles derive from this seed and the epoch index.
    rng_seed: u64,
    next_epoch: usize,
    best_epoch: Option<usize>,
    best_val_loss: Option<f64>,
}

fn put_table<'a>(out: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>) {
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

/// Serialized checkpoint bytes.
pub fn encode_checkpoint(session: &TrainSession) -> Result<Vec<u8>> {
    let meta = Meta {
        descriptor: session.model.descriptor(),
        config: session.config.clone(),
        history: session.history.clone(),
        monitor: session.monitor.clone(),
        stopped: session.stopped,
        adam: session.adam.hyper,
        adam_step: session.adam.step,
        rng_seed: session.config.seed,
        next_epoch: session.epoch() + 1,
        best_epoch: session.best.as_ref().map(|b| b.epoch),
        best_val_loss: session.best.as_ref().map(|b| b.val_loss),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    let params = session.model.params();
    put_table(&mut out, params.iter().map(|(_, n, p)| (n, &p.value)).collect::<Vec<_>>().into_iter());
    put_table(&mut out, session.model.buffers().iter().map(|(k, v)| (k.as_str(), v)));
    let names: Vec<&str> = params.iter().map(|(_, n, _)| n).collect();
    put_table(&mut out, names.iter().copied().zip(&session.adam.m));
    put_table(&mut out, names.iter().copied().zip(&session.adam.v));
    match &session.best {
        Some(b) => {
            put_table(&mut out, b.params.iter().map(|(k, v)| (k.as_str(), v)));
            put_table(&mut out, b.buffers.iter().map(|(k, v)| (k.as_str(), v)));
        }
        None => {
            put_table(&mut out, std::iter::empty());
            put_table(&mut out, std::iter::empty());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend(digest.as_slice());
    Ok(out)
}

pub fn save_checkpoint(session: &TrainSession, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(session)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn table(&mut self) -> Result<IndexMap<String, Tensor<f32>>> {
        let count = self.u32()?;
        let mut out = IndexMap::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            if rank > crate::tensor::MAX_RANK {
                return Err(Error::Checkpoint(format!("`{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            out.insert(name, t);
        }
        Ok(out)
    }
}

fn restore(target: &mut IndexMap<String, Tensor<f32>>, source: &IndexMap<String, Tensor<f32>>, what: &str) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Checkpoint(format!("{what}: {} entries stored, model has {}", source.len(), target.len())));
    }
    for (name, t) in target.iter_mut() {
        let s = source.get(name).ok_or_else(|| Error::Checkpoint(format!("{what}: missing `{name}`")))?;
        if s.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("{what}: `{name}` stored as {:?}, model expects {:?}", s.shape(), t.shape())));
        }
        *t = s.clone();
    }
    Ok(())
}

/// Parses checkpoint bytes, verifying the digest, magic and version.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainSession> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint(format!("truncated: {} bytes", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("digest mismatch: file is truncated or corrupted".into()));
    }
    let mut c = Cursor { buf: body, pos: 8 };
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version} is not supported (expected {CHECKPOINT_VERSION})")));
    }
    let len = c.u64()? as usize;
    let meta: Meta = serde_json::from_slice(c.take(len)?)?;
    let params = c.table()?;
    let buffers = c.table()?;
    let m = c.table()?;
    let v = c.table()?;
    let best_params = c.table()?;
    let best_buffers = c.table()?;
    if c.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - c.pos)));
    }

    let mut model = LayerGraph::<f32>::from_descriptor(&meta.descriptor, 0)?;
    let mut values: IndexMap<String, Tensor<f32>> =
        model.params().iter().map(|(_, n, p)| (n.to_string(), p.value.clone())).collect();
    restore(&mut values, &params, "parameters")?;
    for (name, t) in values {
        let id = model.params().id(&name)?;
        *model.params_mut().value_mut(id) = t;
    }
    restore(model.buffers_mut(), &buffers, "buffers")?;
    let names: Vec<String> = model.params().iter().map(|(_, n, _)| n.to_string()).collect();
    let moments = |table: &IndexMap<String, Tensor<f32>>, what: &str| -> Result<Vec<Tensor<f32>>> {
        names
            .iter()
            .map(|n| table.get(n).cloned().ok_or_else(|| Error::Checkpoint(format!("{what}: missing `{n}`"))))
            .collect()
    };
    let adam = AdamState { hyper: meta.adam, step: meta.adam_step, m: moments(&m, "adam m")?, v: moments(&v, "adam v")? };
    let best = match (meta.best_epoch, meta.best_val_loss) {
        (Some(epoch), Some(val_loss)) => Some(BestSnapshot { epoch, val_loss, params: best_params, buffers: best_buffers }),
        _ => None,
    };
    if meta.next_epoch != meta.history.len() + 1 || meta.rng_seed != meta.config.seed {
        return Err(Error::Checkpoint("inconsistent epoch or RNG state".into()));
    }
    Ok(TrainSession {
        model,
        config: meta.config,
        adam,
        monitor: meta.monitor,
        history: meta.history,
        best,
        stopped: meta.stopped,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainSession> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
