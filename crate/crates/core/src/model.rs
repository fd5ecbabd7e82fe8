//! Encoder + head assembly, keyframe caching and the forward passes.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, FeatureVolume, NUM_TAPS};
use crate::error::{Error, Result};
use crate::head::{self, HeadConfig, TemporalMode};
use crate::numerics::{ParamSet, Rng, Session, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub freeze_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            freeze_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        let e = self.encoder.embed_dim;
        if self.head.feature_dims.iter().any(|&c| c != e) {
            return Err(Error::config(format!(
                "head feature_dims {:?} must all equal encoder embed_dim {e}",
                self.head.feature_dims
            )));
        }
        Ok(())
    }

    /// Builds a head whose input widths follow the encoder.
    pub fn with_encoder(encoder: EncoderConfig, mut head: HeadConfig) -> Self {
        head.feature_dims = [encoder.embed_dim; NUM_TAPS];
        ModelConfig {
            encoder,
            head,
            freeze_encoder: true,
        }
    }
}

/// Reassembled keyframe features at each temporal site.
///
/// Immutable once built; snippets can share one cache.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeCache {
    pub indices: Vec<usize>,
    /// Indexed by tap; `Some([m, d, h, w])` at temporal sites.
    pub sites: Vec<Option<Tensor>>,
    /// Token grid the keyframes were encoded at.
    pub grid: (usize, usize),
}

impl KeyframeCache {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    encoded_frames: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            encoded_frames: AtomicUsize::new(self.encoded_frames()),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("num_params", &self.params.num_scalars())
            .finish()
    }
}

/// Initialises every encoder and head parameter for `config`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let mut ps = ParamSet::new();
    encoder::init_encoder(&mut ps, &config.encoder, &mut rng.fork(1))?;
    head::init_head(&mut ps, &config.head, &mut rng.fork(2))?;
    Ok(ps)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model {
            config,
            params,
            encoded_frames: AtomicUsize::new(0),
        })
    }

    /// Wraps loaded parameters after checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = init_params(&config, 0)?;
        for (name, t) in reference.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::format(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::format(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| reference.get(n).is_none()) {
            return Err(Error::format(format!("unexpected parameter {extra}")));
        }
        Ok(Model {
            config,
            params,
            encoded_frames: AtomicUsize::new(0),
        })
    }

    /// Number of frames pushed through the encoder since construction.
    pub fn encoded_frames(&self) -> usize {
        self.encoded_frames.load(Ordering::Relaxed)
    }

    pub fn reset_counter(&self) {
        self.encoded_frames.store(0, Ordering::Relaxed);
    }

    pub fn encode(&self, frames: &Tensor) -> Result<FeatureVolume> {
        let [n, ..] = frames.dims4("frames")?;
        let fv = encoder::encode(frames, &self.params, &self.config.encoder)?;
        self.encoded_frames.fetch_add(n, Ordering::Relaxed);
        Ok(fv)
    }

    /// Encodes and reassembles the keyframes `video[indices]`.
    pub fn cache_keyframes(&self, video: &Tensor, indices: &[usize]) -> Result<KeyframeCache> {
        let [n, ..] = video.dims4("video")?;
        check_indices(indices, n)?;
        let kf = video.select0(indices)?;
        let fv = self.encode(&kf)?;
        self.cache_from_features(&fv, indices)
    }

    /// Builds a cache from the features of the whole clip, picking `indices`.
    pub fn cache_from_clip_features(&self, fv: &FeatureVolume, indices: &[usize]) -> Result<KeyframeCache> {
        check_indices(indices, fv.frames())?;
        self.cache_from_features(&fv.select(indices)?, indices)
    }

    /// Builds a cache from features holding exactly the keyframes.
    pub fn cache_from_features(&self, kf: &FeatureVolume, indices: &[usize]) -> Result<KeyframeCache> {
        if kf.frames() != indices.len() {
            return Err(Error::shape(format!(
                "{} keyframe indices for {} feature frames",
                indices.len(),
                kf.frames()
            )));
        }
        self.check_features(kf)?;
        let mut s = Session::inference(&self.params);
        let mut sites = vec![None; NUM_TAPS];
        for &site in &self.config.head.temporal_sites {
            let tap = s.tape.constant(kf.taps[site].clone());
            let r = head::reassemble(&mut s, &self.config.head, tap, site)?;
            sites[site] = Some(s.tape.value(r).clone());
        }
        Ok(KeyframeCache {
            indices: indices.to_vec(),
            sites,
            grid: kf.grid(),
        })
    }

    fn check_features(&self, fv: &FeatureVolume) -> Result<()> {
        for (i, t) in fv.taps.iter().enumerate() {
            let c = t.shape()[1];
            if c != self.config.head.feature_dims[i] {
                return Err(Error::shape(format!(
                    "feature tap {i} has {c} channels, head expects {}",
                    self.config.head.feature_dims[i]
                )));
            }
        }
        Ok(())
    }

    fn out_hw(&self, grid: (usize, usize)) -> (usize, usize) {
        let p = self.config.encoder.patch_size;
        (grid.0 * p, grid.1 * p)
    }

    /// Head on precomputed features with keyframes from `cache`.
    pub fn forward_features(&self, fv: &FeatureVolume, cache: &KeyframeCache) -> Result<Tensor> {
        if fv.grid() != cache.grid {
            return Err(Error::shape(format!(
                "frames have token grid {:?}, keyframes {:?}; keyframes must be encoded at the same resolution",
                fv.grid(),
                cache.grid
            )));
        }
        self.run_head(fv, HeadInput::Cache(cache))
    }

    /// Head on precomputed features, each frame its own keyframe.
    pub fn forward_features_image(&self, fv: &FeatureVolume) -> Result<Tensor> {
        self.run_head(fv, HeadInput::SelfKeyframe)
    }

    /// Head on precomputed features with the temporal layers skipped.
    pub fn forward_features_bypass(&self, fv: &FeatureVolume) -> Result<Tensor> {
        self.run_head(fv, HeadInput::Bypass)
    }

    fn run_head(&self, fv: &FeatureVolume, input: HeadInput) -> Result<Tensor> {
        self.check_features(fv)?;
        let mut s = Session::inference(&self.params);
        let taps: Vec<Var> = fv.taps.iter().map(|t| s.tape.constant(t.clone())).collect();
        let mode = match input {
            HeadInput::Bypass => TemporalMode::Bypass,
            HeadInput::SelfKeyframe => TemporalMode::SelfKeyframe,
            HeadInput::Cache(c) => TemporalMode::Keyframes(
                c.sites
                    .iter()
                    .map(|t| t.as_ref().map(|t| s.tape.constant(t.clone())))
                    .collect(),
            ),
        };
        let out = head::head_graph(&mut s, &self.config.head, &taps, &mode, self.out_hw(fv.grid()))?;
        Ok(s.tape.value(out.depth).clone())
    }

    /// Depth for `frames` using a prepared keyframe cache.
    pub fn forward_with_cache(&self, frames: &Tensor, cache: &KeyframeCache) -> Result<Tensor> {
        let fv = self.encode(frames)?;
        self.forward_features(&fv, cache)
    }

    /// Depth for `frames[t]` attending to `keyframes[m]` (both `[_, c, h, w]`).
    pub fn forward_video(&self, frames: &Tensor, keyframes: &Tensor) -> Result<Tensor> {
        let [_, fc, fh, fw] = frames.dims4("frames")?;
        let [m, kc, kh, kw] = keyframes.dims4("keyframes")?;
        if (fc, fh, fw) != (kc, kh, kw) {
            return Err(Error::shape(format!(
                "frames are {fc}x{fh}x{fw}, keyframes {kc}x{kh}x{kw}; keyframes must be encoded at the same resolution"
            )));
        }
        let kfv = self.encode(keyframes)?;
        let idx: Vec<usize> = (0..m).collect();
        let cache = self.cache_from_features(&kfv, &idx)?;
        self.forward_with_cache(frames, &cache)
    }

    /// Image-mode forward: every frame is its own single keyframe.
    pub fn forward_image(&self, frames: &Tensor) -> Result<Tensor> {
        let fv = self.encode(frames)?;
        self.forward_features_image(&fv)
    }

    /// Plain per-frame decoder with the temporal layers bypassed.
    pub fn forward_per_frame(&self, frames: &Tensor) -> Result<Tensor> {
        let fv = self.encode(frames)?;
        self.forward_features_bypass(&fv)
    }
}

enum HeadInput<'a> {
    Cache(&'a KeyframeCache),
    SelfKeyframe,
    Bypass,
}

fn check_indices(indices: &[usize], n: usize) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::config("at least one keyframe index is required"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::config(format!(
            "keyframe index {bad} out of range for {n} frames"
        )));
    }
    if !indices.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::config(format!(
            "keyframe indices {indices:?} must be strictly increasing"
        )));
    }
    Ok(())
}

/// Training-graph pieces: the same computation recorded on a caller's session.
pub mod graph {
    use super::*;

    /// Reassembles keyframe taps at every temporal site.
    pub fn keyframe_sites(s: &mut Session, cfg: &HeadConfig, kf_taps: &[Var]) -> Result<Vec<Option<Var>>> {
        let mut sites = vec![None; NUM_TAPS];
        for &site in &cfg.temporal_sites {
            sites[site] = Some(head::reassemble(s, cfg, kf_taps[site], site)?);
        }
        Ok(sites)
    }

    /// Full model on `frames` (pixels), returning `[n, 1, h, w]` depth.
    pub fn forward(
        s: &mut Session,
        cfg: &ModelConfig,
        frames: Var,
        keyframes: Option<Var>,
    ) -> Result<Var> {
        let [_, _, h, w] = s.tape.value(frames).dims4("frames")?;
        let taps = encoder::encode_graph(s, &cfg.encoder, frames)?;
        let mode = match keyframes {
            None => TemporalMode::SelfKeyframe,
            Some(k) => {
                let kt = encoder::encode_graph(s, &cfg.encoder, k)?;
                TemporalMode::Keyframes(keyframe_sites(s, &cfg.head, &kt)?)
            }
        };
        Ok(head::head_graph(s, &cfg.head, &taps, &mode, (h, w))?.depth)
    }
}
