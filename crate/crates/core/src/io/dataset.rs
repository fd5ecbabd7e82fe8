//! Clip directory layout:
//!
//! ```text
//! clip/
//!   meta.json            {"n", "h", "w", "fps", "depth_convention"}
//!   frames/000000.ppm    one RGB frame per index
//!   depth/000000.pfm     optional ground truth, one map per frame
//!   flow/000000.flo5     optional, flow from frame i to i+1 (n-1 files)
//! ```
//!
//! Indices are six digits, contiguous from zero.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{flo5, pfm, ppm, read_file, write_file};
use crate::error::{Error, Result};
use crate::metrics::FlowField;
use crate::numerics::Tensor;
use crate::synth::LabeledClip;

/// What the stored depth maps hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DepthConvention {
    #[default]
    InverseDepth,
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default)]
    pub depth_convention: DepthConvention,
}

fn default_fps() -> f64 {
    24.0
}

impl Meta {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: Meta = serde_json::from_slice(bytes)
            .map_err(|e| Error::format(format!("meta.json: {e}")))?;
        if m.n == 0 || m.h == 0 || m.w == 0 {
            return Err(Error::format(format!(
                "meta.json: empty clip (n={}, h={}, w={})",
                m.n, m.h, m.w
            )));
        }
        if !(m.fps.is_finite() && m.fps > 0.0) {
            return Err(Error::format(format!("meta.json: fps {} is not positive", m.fps)));
        }
        Ok(m)
    }
}

/// A clip read from disk; labels are present when their folders exist.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: Meta,
    /// `[n, 3, h, w]` in `[0, 1]`.
    pub frames: Tensor,
    /// Inverse depth `[n, 1, h, w]` regardless of the stored convention.
    pub disparity: Option<Tensor>,
    pub flow: Option<FlowField>,
}

pub fn index_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

/// Paths of `NNNNNN.<ext>` files in `dir`, checked to run 0..k without gaps.
pub fn list_series(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut idx = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if stem.len() != 6 || !stem.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::format(format!(
                "{}: expected a six-digit index name",
                path.display()
            )));
        }
        idx.push(stem.parse::<usize>().unwrap());
    }
    idx.sort_unstable();
    for (want, &got) in idx.iter().enumerate() {
        if want != got {
            return Err(Error::format(format!(
                "{}: missing {} (indices must be contiguous from 0)",
                dir.display(),
                index_name(want, ext)
            )));
        }
    }
    Ok(idx.iter().map(|&i| dir.join(index_name(i, ext))).collect())
}

fn stack(maps: Vec<Tensor>, what: &str, dir: &Path) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::format(format!("{}: no {what} files", dir.display())))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(maps.len() * first.numel());
    for (i, m) in maps.iter().enumerate() {
        if m.shape() != shape.as_slice() {
            return Err(Error::format(format!(
                "{}: {what} {i} has shape {:?}, {what} 0 has {shape:?}",
                dir.display(),
                m.shape()
            )));
        }
        data.extend_from_slice(m.data());
    }
    let mut full = vec![maps.len()];
    full.extend_from_slice(&shape);
    Tensor::new(&full, data)
}

/// Reads every PFM in `dir` into `[n, 1, h, w]`.
pub fn read_depth_dir(dir: &Path) -> Result<Tensor> {
    let maps = list_series(dir, "pfm")?
        .iter()
        .map(|p| pfm::decode(&read_file(p)?).map_err(|e| annotate(p, e)))
        .collect::<Result<Vec<_>>>()?;
    stack(maps, "depth map", dir)
}

pub fn write_depth_dir(dir: &Path, maps: &Tensor) -> Result<()> {
    let [n, c, _, _] = maps.dims4("depth maps")?;
    if c != 1 {
        return Err(Error::shape(format!("depth maps need one channel, got {c}")));
    }
    for i in 0..n {
        write_file(&dir.join(index_name(i, "pfm")), &pfm::encode(&maps.index0(i))?)?;
    }
    Ok(())
}

pub fn read_frames_dir(dir: &Path) -> Result<Tensor> {
    let frames = list_series(dir, "ppm")?
        .iter()
        .map(|p| ppm::decode(&read_file(p)?).map_err(|e| annotate(p, e)))
        .collect::<Result<Vec<_>>>()?;
    stack(frames, "frame", dir)
}

pub fn write_frames_dir(dir: &Path, frames: &Tensor) -> Result<()> {
    let [n, _, _, _] = frames.dims4("frames")?;
    for i in 0..n {
        write_file(&dir.join(index_name(i, "ppm")), &ppm::encode(&frames.index0(i))?)?;
    }
    Ok(())
}

pub fn read_flow_dir(dir: &Path) -> Result<FlowField> {
    let mut flows = Vec::new();
    let mut valid = Vec::new();
    for p in list_series(dir, "flo5")? {
        let (f, v) = flo5::decode(&read_file(&p)?).map_err(|e| annotate(&p, e))?;
        flows.push(f);
        valid.push(v);
    }
    FlowField::new(stack(flows, "flow", dir)?, stack(valid, "flow", dir)?)
}

pub fn write_flow_dir(dir: &Path, flow: &FlowField) -> Result<()> {
    for i in 0..flow.pairs() {
        let bytes = flo5::encode(&flow.flow.index0(i), &flow.valid.index0(i))?;
        write_file(&dir.join(index_name(i, "flo5")), &bytes)?;
    }
    Ok(())
}

fn annotate(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Loads a clip and checks every folder against `meta.json`.
pub fn read_clip(dir: &Path) -> Result<Dataset> {
    let meta = Meta::from_json(&read_file(&dir.join("meta.json"))?)?;
    let frames = read_frames_dir(&dir.join("frames"))?;
    let expect = |what: &str, t: &Tensor, n: usize, c: usize| -> Result<()> {
        if t.shape() != [n, c, meta.h, meta.w] {
            return Err(Error::format(format!(
                "{}: {what} have shape {:?}, meta.json implies {:?}",
                dir.display(),
                t.shape(),
                [n, c, meta.h, meta.w]
            )));
        }
        Ok(())
    };
    expect("frames", &frames, meta.n, 3)?;
    let depth_dir = dir.join("depth");
    let disparity = if depth_dir.is_dir() {
        let d = read_depth_dir(&depth_dir)?;
        expect("depth maps", &d, meta.n, 1)?;
        Some(match meta.depth_convention {
            DepthConvention::InverseDepth => d,
            DepthConvention::Depth => d.map(|z| if z > 0.0 { 1.0 / z } else { 0.0 }),
        })
    } else {
        None
    };
    let flow_dir = dir.join("flow");
    let flow = if flow_dir.is_dir() && meta.n > 1 {
        let f = read_flow_dir(&flow_dir)?;
        expect("flow fields", &f.flow, meta.n - 1, 2)?;
        Some(f)
    } else {
        None
    };
    Ok(Dataset {
        meta,
        frames,
        disparity,
        flow,
    })
}

pub fn write_meta(dir: &Path, meta: &Meta) -> Result<()> {
    write_file(&dir.join("meta.json"), &serde_json::to_vec_pretty(meta)?)
}

/// Writes a rendered clip with depth stored as inverse depth.
pub fn write_clip(dir: &Path, clip: &LabeledClip, fps: f64) -> Result<()> {
    let (h, w) = clip.size();
    write_meta(
        dir,
        &Meta {
            n: clip.len(),
            h,
            w,
            fps,
            depth_convention: DepthConvention::InverseDepth,
        },
    )?;
    write_frames_dir(&dir.join("frames"), &clip.frames)?;
    write_depth_dir(&dir.join("depth"), &clip.disparity)?;
    if clip.len() > 1 {
        write_flow_dir(&dir.join("flow"), &clip.flow)?;
    }
    Ok(())
}
