//! `MWCK` checkpoint files.
//!
//! Layout: magic, version u32, count u32, `count` tensor records, then the
//! optimizer section: iteration u64, count u32 and one record per moment
//! buffer named `m/<param>` or `v/<param>`. A record is name length u32, UTF-8
//! name, flags u8 (bit0 is_bias, bit1 trainable), rank u32, dims u32 x rank
//! and the float32 values. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use wxmatch_core::diff::{AdamW, Moments, ParameterStore};
use wxmatch_core::train::{TrainConfig, TrainState, ADAM_EPS};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MWCK";
pub const VERSION: u32 = 1;

struct Record {
    name: String,
    flags: u8,
    shape: Vec<usize>,
    values: Vec<f32>,
}

fn put_record(out: &mut Vec<u8>, name: &str, flags: u8, shape: &[usize], values: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(flags);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes weights, flags and optimizer moments.
pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(state.store.len() as u32).to_le_bytes());
    for p in state.store.iter() {
        let flags = u8::from(p.is_bias) | (u8::from(p.trainable) << 1);
        put_record(&mut out, &p.name, flags, &p.shape, &p.values);
    }
    out.extend_from_slice(&state.iteration.to_le_bytes());
    out.extend_from_slice(&(2 * state.optimizer.state.len() as u32).to_le_bytes());
    for (name, mom) in &state.optimizer.state {
        put_record(&mut out, &format!("m/{name}"), 0, &[mom.m.len()], &mom.m);
        put_record(&mut out, &format!("v/{name}"), 0, &[mom.v.len()], &mom.v);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))?
            .to_owned();
        let flags = self.u8()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = self
            .take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::format(self.path, "tensor too large"))?,
            )?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Record {
            name,
            flags,
            shape,
            values,
        })
    }
}

/// Parses a checkpoint. Optimizer hyperparameters come from `cfg`.
pub fn decode(bytes: &[u8], path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "missing MWCK magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let rec = r.record()?;
        let id = store.add(rec.name, &rec.shape, rec.values, rec.flags & 1 != 0)?;
        store.get_mut(id).trainable = rec.flags & 2 != 0;
    }
    let iteration = r.u64()?;
    let opt_count = r.u32()?;
    let mut optimizer = AdamW::new(cfg.beta1, cfg.beta2, ADAM_EPS, cfg.weight_decay);
    for _ in 0..opt_count {
        let rec = r.record()?;
        let (kind, name) = rec
            .name
            .split_once('/')
            .ok_or_else(|| Error::format(path, format!("bad optimizer record `{}`", rec.name)))?;
        let expected = store
            .by_name(name)
            .ok_or_else(|| Error::format(path, format!("moments for unknown tensor `{name}`")))?
            .len();
        if rec.values.len() != expected {
            return Err(Error::format(path, format!("moment size mismatch for `{name}`")));
        }
        let entry = optimizer.state.entry(name.to_owned()).or_insert_with(|| Moments {
            m: Vec::new(),
            v: Vec::new(),
        });
        match kind {
            "m" => entry.m = rec.values,
            "v" => entry.v = rec.values,
            _ => return Err(Error::format(path, format!("bad optimizer record `{}`", rec.name))),
        }
    }
    if let Some((name, _)) = optimizer.state.iter().find(|(_, m)| m.m.is_empty() || m.v.is_empty()) {
        return Err(Error::format(path, format!("incomplete moments for `{name}`")));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(TrainState {
        store,
        optimizer,
        iteration,
    })
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, cfg)
}

/// Settings needed to rebuild the network from a checkpoint, stored next to it
/// as `<checkpoint>.json`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: wxmatch_core::model::ModelConfig,
    pub train: TrainConfig,
    pub adapt: wxmatch_core::train::AdaptConfig,
    /// Support size used at adaptation; 0 before any adaptation.
    pub shots: usize,
}

pub fn meta_path(ckpt: &Path) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn save_with_meta(path: &Path, state: &TrainState, meta: &CheckpointMeta) -> Result<()> {
    save(path, state)?;
    let mp = meta_path(path);
    fs::write(&mp, serde_json::to_string_pretty(meta)? + "\n").map_err(|e| Error::io(&mp, e))
}

pub fn load_with_meta(path: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    Ok((load(path, &meta.train)?, meta))
}
