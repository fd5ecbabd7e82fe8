//! Tensor container used for checkpoints and imported encoder features.
//!
//! Layout (little-endian):
//! `"SDPT"`, `u32` version, `u32` JSON length, JSON metadata, `u32` tensor
//! count, one table entry per tensor (`u32` name length, name, `u8` dtype,
//! `u32` rank, `u64` extents, `u64` payload offset), `u64` payload length,
//! payload, then a CRC32 of every preceding byte.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Reader;
use crate::encoder::{FeatureSource, FeatureVolume, NUM_TAPS};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"SDPT";
pub const VERSION: u32 = 1;
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

/// Serialises with every tensor stored as f64.
pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&c.meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    let mut seen = BTreeSet::new();
    for (name, t) in &c.tensors {
        if name.len() > MAX_NAME || !seen.insert(name.as_str()) {
            return Err(Error::format(format!("tensor name {name:?} is too long or repeated")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DType::F64 as u8);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, t) in &c.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format("container: bad magic (expected SDPT)"));
    }
    if bytes.len() < 12 {
        return Err(Error::format("container: truncated header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader::new(body, "container");
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "container: unsupported version {version} (this build reads version {VERSION})"
        )));
    }
    let want = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != want {
        return Err(Error::format("container: checksum mismatch, file is corrupt"));
    }
    let meta_len = r.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::format(format!("container: metadata is not JSON: {e}")))?;
    let count = r.u32()? as usize;
    // each entry needs at least 17 bytes
    if count > r.remaining() / 17 {
        return Err(Error::format(format!("container: tensor count {count} exceeds file size")));
    }
    let mut entries = Vec::with_capacity(count);
    let mut names = BTreeSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        if len > MAX_NAME {
            return Err(Error::format(format!("container: tensor name of {len} bytes")));
        }
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format("container: tensor name is not UTF-8"))?;
        if !names.insert(name.clone()) {
            return Err(Error::format(format!("container: tensor {name:?} appears twice")));
        }
        let dtype = match r.u8()? {
            0 => DType::F64,
            1 => DType::F32,
            d => return Err(Error::format(format!("container: unknown dtype {d} for {name:?}"))),
        };
        let rank = r.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(format!("container: rank {rank} for {name:?}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64()?;
            shape.push(usize::try_from(d).map_err(|_| Error::format("container: extent too large"))?);
        }
        let offset = usize::try_from(r.u64()?).map_err(|_| Error::format("container: offset too large"))?;
        entries.push(Entry {
            name,
            dtype,
            shape,
            offset,
        });
    }
    let payload_len = usize::try_from(r.u64()?).map_err(|_| Error::format("container: payload too large"))?;
    let payload = r.take(payload_len)?;
    if r.remaining() != 0 {
        return Err(Error::format(format!("container: {} stray bytes before checksum", r.remaining())));
    }
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::format(format!("container: bad shape {:?} for {:?}", e.shape, e.name)))?;
        let size = numel
            .checked_mul(e.dtype.size())
            .filter(|&s| e.offset.checked_add(s).is_some_and(|end| end <= payload.len()))
            .ok_or_else(|| Error::format(format!("container: tensor {:?} runs past the payload", e.name)))?;
        let raw = &payload[e.offset..e.offset + size];
        let data: Vec<f64> = match e.dtype {
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        tensors.push((e.name, Tensor::new(&e.shape, data)?));
    }
    Ok(Container { meta, tensors })
}

/// Model weights with optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamSet,
    pub adam_m: ParamSet,
    pub adam_v: ParamSet,
    /// Free-form settings stored with the weights (e.g. the training config).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    model: ModelConfig,
    step: u64,
    #[serde(default)]
    extra: serde_json::Value,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            kind: "checkpoint".into(),
            model: self.config.clone(),
            step: self.step,
            extra: self.extra.clone(),
        };
        let mut tensors = Vec::new();
        for (group, set) in GROUPS.iter().zip([&self.params, &self.adam_m, &self.adam_v]) {
            for (name, t) in set.iter() {
                tensors.push((format!("{group}/{name}"), t.clone()));
            }
        }
        encode(&Container {
            meta: serde_json::to_value(meta)?,
            tensors,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta)
            .map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
        if meta.kind != "checkpoint" {
            return Err(Error::format(format!("container holds {:?}, not a checkpoint", meta.kind)));
        }
        let mut sets = [ParamSet::new(), ParamSet::new(), ParamSet::new()];
        for (name, t) in c.tensors {
            let (group, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::format(format!("checkpoint tensor {name:?} has no group")))?;
            let gi = GROUPS
                .iter()
                .position(|&g| g == group)
                .ok_or_else(|| Error::format(format!("checkpoint tensor group {group:?} unknown")))?;
            sets[gi].insert(rest, t);
        }
        let [params, adam_m, adam_v] = sets;
        Ok(Checkpoint {
            config: meta.model,
            step: meta.step,
            params,
            adam_m,
            adam_v,
            extra: meta.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&super::read_file(path)?)
    }
}

/// Encoder features supplied from outside, one tensor per tap.
pub fn encode_features(fv: &FeatureVolume) -> Result<Vec<u8>> {
    encode(&Container {
        meta: serde_json::json!({ "kind": "features" }),
        tensors: fv
            .taps
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("tap{i}"), t.clone()))
            .collect(),
    })
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureVolume> {
    let c = decode(bytes)?;
    if c.meta.get("kind").and_then(|k| k.as_str()) != Some("features") {
        return Err(Error::format("container does not hold encoder features"));
    }
    let mut taps = Vec::with_capacity(NUM_TAPS);
    for i in 0..NUM_TAPS {
        let name = format!("tap{i}");
        let t = c
            .tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::format(format!("features lack {name}")))?;
        taps.push(t.1.clone());
    }
    if c.tensors.len() != NUM_TAPS {
        return Err(Error::format(format!(
            "features hold {} tensors, expected {NUM_TAPS}",
            c.tensors.len()
        )));
    }
    FeatureVolume::new(taps, FeatureSource::Imported)
}
