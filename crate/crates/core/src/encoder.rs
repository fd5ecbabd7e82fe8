//! Per-frame ViT-style encoder.
//!
//! Frames are patch-embedded with a `p×p` stride-`p` convolution, given a
//! learned positional embedding, and run through pre-norm transformer
//! blocks whose self-attention spans the patches of one frame only. The
//! outputs of four configured blocks are exported as feature taps.

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig};
use crate::error::{Error, Result};
use crate::layers;
use crate::numerics::{ParamSet, Rng, Session, Tensor, Var};

pub const NUM_TAPS: usize = 4;

/// Pixel standardisation applied after scaling to `[0, 1]`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub tap_indices: [usize; NUM_TAPS],
    /// Token grid the positional embedding is stored at; other grids resample it.
    pub pos_grid: [usize; 2],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 8,
            in_channels: 3,
            embed_dim: 64,
            depth: 8,
            num_heads: 4,
            tap_indices: [1, 3, 5, 7],
            pos_grid: [4, 4],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.embed_dim, self.num_heads)?;
        if self.patch_size == 0 || self.in_channels == 0 {
            return Err(Error::config("patch_size and in_channels must be positive"));
        }
        if !self.tap_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config(format!(
                "tap_indices {:?} must be strictly increasing",
                self.tap_indices
            )));
        }
        if self.tap_indices[NUM_TAPS - 1] >= self.depth {
            return Err(Error::config(format!(
                "tap index {} out of range for depth {}",
                self.tap_indices[NUM_TAPS - 1],
                self.depth
            )));
        }
        if self.pos_grid.contains(&0) {
            return Err(Error::config("pos_grid extents must be positive"));
        }
        Ok(())
    }

    /// Token grid for an `h×w` frame.
    pub fn token_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "frame size {h}x{w} is not divisible by patch size {p}"
            )));
        }
        Ok((h / p, w / p))
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Computed,
    Imported,
}

/// Encoder taps for a clip, each `[n, c_i, h/p, w/p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub taps: Vec<Tensor>,
    pub source: FeatureSource,
}

impl FeatureVolume {
    pub fn new(taps: Vec<Tensor>, source: FeatureSource) -> Result<Self> {
        if taps.len() != NUM_TAPS {
            return Err(Error::format(format!(
                "expected {NUM_TAPS} feature taps, found {}",
                taps.len()
            )));
        }
        let mut lead = None;
        for (i, t) in taps.iter().enumerate() {
            let [n, _, h, w] = t
                .dims4("feature tap")
                .map_err(|e| Error::format(format!("tap {i}: {e}")))?;
            match lead {
                None => lead = Some((n, h, w)),
                Some(l) if l != (n, h, w) => {
                    return Err(Error::format(format!(
                        "tap {i} has frames/grid {:?}, tap 0 has {l:?}",
                        (n, h, w)
                    )))
                }
                _ => {}
            }
        }
        Ok(FeatureVolume { taps, source })
    }

    pub fn frames(&self) -> usize {
        self.taps[0].shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.taps[0].shape();
        (s[2], s[3])
    }

    /// Gathers frames by index from every tap.
    pub fn select(&self, indices: &[usize]) -> Result<FeatureVolume> {
        let taps = self
            .taps
            .iter()
            .map(|t| t.select0(indices))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureVolume {
            taps,
            source: self.source,
        })
    }

    /// Concatenates along the frame axis.
    pub fn concat(parts: &[&FeatureVolume]) -> Result<FeatureVolume> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero feature volumes"))?;
        let taps = (0..NUM_TAPS)
            .map(|i| {
                let ts: Vec<&Tensor> = parts.iter().map(|p| &p.taps[i]).collect();
                Tensor::concat0(&ts)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureVolume {
            taps,
            source: first.source,
        })
    }
}

pub fn init_encoder(ps: &mut ParamSet, cfg: &EncoderConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let e = cfg.embed_dim;
    layers::init_conv(ps, "encoder.patch", cfg.in_channels, e, cfg.patch_size, rng);
    let g = cfg.pos_grid[0] * cfg.pos_grid[1];
    let pos = (0..g * e).map(|_| rng.uniform(-0.02, 0.02)).collect();
    ps.insert("encoder.pos", Tensor::new(&[1, e, cfg.pos_grid[0], cfg.pos_grid[1]], pos)?);
    let att = cfg.attention();
    for b in 0..cfg.depth {
        let pre = format!("encoder.block{b}");
        layers::init_layernorm(ps, &format!("{pre}.ln1"), e);
        attention::init_attention(ps, &format!("{pre}.attn"), &att, rng);
        layers::init_layernorm(ps, &format!("{pre}.ln2"), e);
        layers::init_ffn(ps, &format!("{pre}.ffn"), e, rng);
    }
    Ok(())
}

/// Records the encoder on `s` for `frames[n, c, h, w]` with pixels in `[0, 1]`.
///
/// Returns the four taps, each `[n, embed_dim, h/p, w/p]`.
pub fn encode_graph(s: &mut Session, cfg: &EncoderConfig, frames: Var) -> Result<Vec<Var>> {
    let shape = s.tape.shape(frames).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(Error::shape(format!("frames must be [n, c, h, w], got {shape:?}")));
    };
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "encoder expects {} channels, frames have {c}",
            cfg.in_channels
        )));
    }
    let (gh, gw) = cfg.token_grid(h, w)?;
    let e = cfg.embed_dim;

    let x = s.tape.add_const(frames, -PIXEL_MEAN);
    let x = s.tape.mul_const(x, 1.0 / PIXEL_STD);
    let x = layers::conv(s, "encoder.patch", x, cfg.patch_size, 0)?;
    let pos = s.param("encoder.pos")?;
    let pos = s.tape.resize_bilinear(pos, gh, gw)?;
    let x = s.tape.add(x, pos)?;
    let x = s.tape.reshape(x, &[n, e, gh * gw])?;
    let mut x = s.tape.permute(x, &[0, 2, 1])?;

    let att = cfg.attention();
    let mut taps = Vec::with_capacity(NUM_TAPS);
    for b in 0..cfg.depth {
        let pre = format!("encoder.block{b}");
        let h1 = layers::layernorm(s, &format!("{pre}.ln1"), x)?;
        let a = attention::multihead_attention(s, &format!("{pre}.attn"), h1, h1, &att)?;
        x = s.tape.add(x, a)?;
        let h2 = layers::layernorm(s, &format!("{pre}.ln2"), x)?;
        let f = layers::ffn(s, &format!("{pre}.ffn"), h2)?;
        x = s.tape.add(x, f)?;
        if cfg.tap_indices.contains(&b) {
            let t = s.tape.permute(x, &[0, 2, 1])?;
            taps.push(s.tape.reshape(t, &[n, e, gh, gw])?);
        }
    }
    Ok(taps)
}

/// Encodes a clip `[n, c, h, w]` without recording gradients.
pub fn encode(frames: &Tensor, params: &ParamSet, cfg: &EncoderConfig) -> Result<FeatureVolume> {
    let mut s = Session::inference(params);
    let x = s.tape.constant(frames.clone());
    let taps = encode_graph(&mut s, cfg, x)?;
    let taps = taps.into_iter().map(|t| s.tape.value(t).clone()).collect();
    FeatureVolume::new(taps, FeatureSource::Computed)
}
