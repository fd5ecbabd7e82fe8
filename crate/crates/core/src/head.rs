//! Dense-prediction decoder with temporal cross-attention.
//!
//! Each encoder tap is reassembled into an image-like map at its pyramid
//! scale. At the temporal sites (by default the two deepest taps) a stack of
//! temporal layers lets every patch of the current frames attend, across
//! time only, to the same patch of the keyframes. The pyramid is then fused
//! coarse-to-fine and decoded into one positive depth map per frame.

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig};
use crate::encoder::NUM_TAPS;
use crate::error::{Error, Result};
use crate::layers;
use crate::numerics::{ParamSet, Rng, Session, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub feature_dims: [usize; NUM_TAPS],
    pub fusion_dim: usize,
    pub temporal_layers_per_site: usize,
    pub temporal_sites: Vec<usize>,
    pub num_heads: usize,
    pub zero_init: bool,
    /// Adds a sinusoidal slot code to keyframe tokens.
    pub temporal_pos_encoding: bool,
    /// Lets current frames attend to each other as well as to keyframes.
    pub snippet_self_attention: bool,
    pub head_hidden: usize,
    /// Reassemble rescaling of each tap relative to the token grid.
    pub scales: [f64; NUM_TAPS],
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            feature_dims: [64; NUM_TAPS],
            fusion_dim: 16,
            temporal_layers_per_site: 2,
            temporal_sites: vec![2, 3],
            num_heads: 2,
            zero_init: true,
            temporal_pos_encoding: false,
            snippet_self_attention: false,
            head_hidden: 8,
            scales: [4.0, 2.0, 1.0, 0.5],
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.fusion_dim, self.num_heads)?;
        if self.temporal_sites.iter().any(|&s| s >= NUM_TAPS) {
            return Err(Error::config(format!(
                "temporal sites {:?} must lie in 0..{NUM_TAPS}",
                self.temporal_sites
            )));
        }
        if !self.temporal_sites.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("temporal sites must be strictly increasing"));
        }
        if !self.temporal_sites.is_empty() && self.temporal_layers_per_site == 0 {
            return Err(Error::config("temporal_layers_per_site must be at least 1"));
        }
        if self.fusion_dim < 2 || self.head_hidden == 0 {
            return Err(Error::config("fusion_dim must be >= 2 and head_hidden >= 1"));
        }
        if self.scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("reassemble scales must be positive"));
        }
        Ok(())
    }

    pub fn has_temporal(&self) -> bool {
        !self.temporal_sites.is_empty()
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            embed_dim: self.fusion_dim,
            num_heads: self.num_heads,
        }
    }

    /// Spatial extents of site `site` for a `gh×gw` token grid.
    pub fn site_extent(&self, site: usize, gh: usize, gw: usize) -> (usize, usize) {
        let sc = self.scales[site];
        let f = |g: usize| ((g as f64 * sc).round() as usize).max(1);
        (f(gh), f(gw))
    }
}

pub fn temporal_prefix(site: usize, layer: usize) -> String {
    format!("head.temporal.s{site}.l{layer}")
}

pub fn init_head(ps: &mut ParamSet, cfg: &HeadConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.fusion_dim;
    for (i, &c) in cfg.feature_dims.iter().enumerate() {
        layers::init_conv(ps, &format!("head.reassemble{i}"), c, d, 1, rng);
    }
    let att = cfg.attention();
    for &site in &cfg.temporal_sites {
        for l in 0..cfg.temporal_layers_per_site {
            let pre = temporal_prefix(site, l);
            layers::init_layernorm(ps, &format!("{pre}.ln1"), d);
            attention::init_attention(ps, &format!("{pre}.attn"), &att, rng);
            layers::init_layernorm(ps, &format!("{pre}.ln2"), d);
            layers::init_ffn(ps, &format!("{pre}.ffn"), d, rng);
            if cfg.zero_init {
                layers::init_linear_zero(ps, &format!("{pre}.out"), d, d);
            } else {
                layers::init_linear(ps, &format!("{pre}.out"), d, d, rng);
            }
        }
    }
    for k in 0..NUM_TAPS {
        for unit in ["rcu_a", "rcu_b"] {
            for conv in ["conv1", "conv2"] {
                layers::init_conv(ps, &format!("head.fusion{k}.{unit}.{conv}"), d, d, 3, rng);
            }
        }
    }
    layers::init_conv(ps, "head.out.conv1", d, d / 2, 3, rng);
    layers::init_conv(ps, "head.out.conv2", d / 2, cfg.head_hidden, 3, rng);
    layers::init_conv(ps, "head.out.conv3", cfg.head_hidden, 1, 1, rng);
    Ok(())
}

/// 1×1 projection to `fusion_dim` channels, then bilinear rescale to the site's pyramid level.
pub fn reassemble(s: &mut Session, cfg: &HeadConfig, tap: Var, site: usize) -> Result<Var> {
    let [_, _, gh, gw] = s.tape.value(tap).dims4("encoder tap")?;
    let x = layers::conv(s, &format!("head.reassemble{site}"), tap, 1, 0)?;
    let (h, w) = cfg.site_extent(site, gh, gw);
    s.tape.resize_bilinear(x, h, w)
}

/// Where a temporal layer takes its keys and values from.
#[derive(Clone, Copy, Debug)]
pub enum KeySource {
    /// Shared keyframe features `[m, d, h, w]` for every current frame.
    Keyframes(Var),
    /// Each frame is its own single keyframe; features `[t, d, h, w]`.
    SelfFrame(Var),
}

/// One residual temporal block:
/// `current + out_proj(ffn_block(attn_block(current)))` with pre-norm
/// cross-attention over the temporal token layout.
pub fn temporal_layer(
    s: &mut Session,
    cfg: &HeadConfig,
    prefix: &str,
    current: Var,
    keys: KeySource,
) -> Result<Var> {
    let [t, d, h, w] = s.tape.value(current).dims4("current features")?;
    let kv_feats = match keys {
        KeySource::Keyframes(k) | KeySource::SelfFrame(k) => k,
    };
    let [m, dk, kh, kw] = s.tape.value(kv_feats).dims4("keyframe features")?;
    if (dk, kh, kw) != (d, h, w) {
        return Err(Error::shape(format!(
            "keyframe features {:?} do not match current features {:?}; keyframes must be encoded at the same resolution",
            s.tape.shape(kv_feats),
            s.tape.shape(current)
        )));
    }
    let cur_tok = attention::to_temporal_tokens(&mut s.tape, current)?;
    let kv_tok = attention::to_temporal_tokens(&mut s.tape, kv_feats)?;
    let (cur_tok, kv_tok) = match keys {
        KeySource::Keyframes(_) => (cur_tok, kv_tok),
        KeySource::SelfFrame(_) => {
            if m != t {
                return Err(Error::shape(format!(
                    "self-keyframe mode needs one keyframe per frame ({m} vs {t})"
                )));
            }
            (
                s.tape.reshape(cur_tok, &[h * w * t, 1, d])?,
                s.tape.reshape(kv_tok, &[h * w * t, 1, d])?,
            )
        }
    };

    let ln1 = format!("{prefix}.ln1");
    let q_in = layers::layernorm(s, &ln1, cur_tok)?;
    let mut kv_in = layers::layernorm(s, &ln1, kv_tok)?;
    if let KeySource::Keyframes(_) = keys {
        if cfg.temporal_pos_encoding {
            let mut code = Vec::with_capacity(m * d);
            for slot in 0..m {
                code.extend(attention::sinusoidal_code(slot, d));
            }
            let code = s.tape.constant(Tensor::new(&[1, m, d], code)?);
            kv_in = s.tape.add(kv_in, code)?;
        }
        if cfg.snippet_self_attention {
            kv_in = s.tape.concat(&[kv_in, q_in], 1)?;
        }
    }
    let att = attention::multihead_attention(s, &format!("{prefix}.attn"), q_in, kv_in, &cfg.attention())?;
    let a = s.tape.add(cur_tok, att)?;
    let f_in = layers::layernorm(s, &format!("{prefix}.ln2"), a)?;
    let f = layers::ffn(s, &format!("{prefix}.ffn"), f_in)?;
    let f = s.tape.add(a, f)?;
    let y = layers::linear(s, &format!("{prefix}.out"), f)?;
    let out = s.tape.add(cur_tok, y)?;

    let out = match keys {
        KeySource::Keyframes(_) => out,
        KeySource::SelfFrame(_) => s.tape.reshape(out, &[h * w, t, d])?,
    };
    attention::from_temporal_tokens(&mut s.tape, out, h, w)
}

fn rcu(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let h = s.tape.relu(x);
    let h = layers::conv(s, &format!("{prefix}.conv1"), h, 1, 1)?;
    let h = s.tape.relu(h);
    let h = layers::conv(s, &format!("{prefix}.conv2"), h, 1, 1)?;
    s.tape.add(x, h)
}

/// Coarse-to-fine fusion of the four pyramid streams (finest first).
///
/// Each level: residual unit on the stream, add the coarser result resized
/// to this level, second residual unit. Output has the finest stream's extents.
pub fn fuse(s: &mut Session, streams: &[Var]) -> Result<Var> {
    if streams.len() != NUM_TAPS {
        return Err(Error::shape(format!(
            "fusion needs {NUM_TAPS} streams, got {}",
            streams.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for k in (0..NUM_TAPS).rev() {
        let x = rcu(s, &format!("head.fusion{k}.rcu_a"), streams[k])?;
        let x = match acc {
            None => x,
            Some(coarse) => {
                let [_, _, h, w] = s.tape.value(x).dims4("fusion stream")?;
                let up = s.tape.resize_bilinear(coarse, h, w)?;
                s.tape.add(x, up)?
            }
        };
        acc = Some(rcu(s, &format!("head.fusion{k}.rcu_b"), x)?);
    }
    Ok(acc.expect("four streams"))
}

/// conv → resize to `h×w` → conv → ReLU → 1-channel conv → softplus.
pub fn output_head(s: &mut Session, fused: Var, h: usize, w: usize) -> Result<Var> {
    let x = layers::conv(s, "head.out.conv1", fused, 1, 1)?;
    let x = s.tape.resize_bilinear(x, h, w)?;
    let x = layers::conv(s, "head.out.conv2", x, 1, 1)?;
    let x = s.tape.relu(x);
    let x = layers::conv(s, "head.out.conv3", x, 1, 0)?;
    Ok(s.tape.softplus(x))
}

/// How the temporal sites are driven for one head evaluation.
#[derive(Clone, Debug)]
pub enum TemporalMode {
    /// Reassembled keyframe features per tap index (`Some` at every temporal site).
    Keyframes(Vec<Option<Var>>),
    /// Every frame attends to itself only (image batches).
    SelfKeyframe,
    /// Temporal layers skipped: the plain per-frame decoder.
    Bypass,
}

pub struct HeadOutput {
    /// `[n, 1, h, w]` positive relative inverse depth.
    pub depth: Var,
    /// Pyramid after the temporal layers, finest first.
    pub streams: Vec<Var>,
    pub fused: Var,
}

/// Runs the full head on encoder taps of `n` frames.
pub fn head_graph(
    s: &mut Session,
    cfg: &HeadConfig,
    taps: &[Var],
    mode: &TemporalMode,
    out_hw: (usize, usize),
) -> Result<HeadOutput> {
    if taps.len() != NUM_TAPS {
        return Err(Error::shape(format!("head needs {NUM_TAPS} taps, got {}", taps.len())));
    }
    let mut streams = Vec::with_capacity(NUM_TAPS);
    for (site, &tap) in taps.iter().enumerate() {
        let mut x = reassemble(s, cfg, tap, site)?;
        if cfg.temporal_sites.contains(&site) {
            let keys = match mode {
                TemporalMode::Bypass => None,
                TemporalMode::SelfKeyframe => Some(KeySource::SelfFrame(x)),
                TemporalMode::Keyframes(kf) => Some(KeySource::Keyframes(
                    kf.get(site).copied().flatten().ok_or_else(|| {
                        Error::config(format!("no keyframe features for temporal site {site}"))
                    })?,
                )),
            };
            if let Some(keys) = keys {
                for l in 0..cfg.temporal_layers_per_site {
                    x = temporal_layer(s, cfg, &temporal_prefix(site, l), x, keys)?;
                }
            }
        }
        streams.push(x);
    }
    let fused = fuse(s, &streams)?;
    let depth = output_head(s, fused, out_hw.0, out_hw.1)?;
    Ok(HeadOutput {
        depth,
        streams,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> HeadConfig {
        HeadConfig {
            feature_dims: [8; 4],
            fusion_dim: 8,
            ..HeadConfig::default()
        }
    }

    fn params(cfg: &HeadConfig, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        init_head(&mut ps, cfg, &mut Rng::new(seed)).unwrap();
        ps
    }

    fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn config_validation() {
        HeadConfig::default().validate().unwrap();
        let mut c = HeadConfig::default();
        c.temporal_sites = vec![4];
        assert!(c.validate().is_err());
        c.temporal_sites = vec![3];
        c.temporal_layers_per_site = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_init_projection_is_exactly_zero() {
        let c = cfg();
        let ps = params(&c, 1);
        for &site in &c.temporal_sites {
            for l in 0..c.temporal_layers_per_site {
                let pre = temporal_prefix(site, l);
                assert!(ps.get(&format!("{pre}.out.weight")).unwrap().data().iter().all(|&v| v == 0.0));
                assert!(ps.get(&format!("{pre}.out.bias")).unwrap().data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn fresh_temporal_layer_is_identity() {
        let c = cfg();
        let ps = params(&c, 2);
        let mut rng = Rng::new(3);
        let mut s = Session::inference(&ps);
        let cur_t = rand(&[3, 8, 4, 4], &mut rng);
        let cur = s.tape.constant(cur_t.clone());
        let kf = s.tape.constant(rand(&[2, 8, 4, 4], &mut rng));
        let out = temporal_layer(&mut s, &c, &temporal_prefix(2, 0), cur, KeySource::Keyframes(kf)).unwrap();
        assert_eq!(s.tape.value(out), &cur_t);
    }

    #[test]
    fn keyframe_resolution_mismatch_is_error() {
        let c = cfg();
        let ps = params(&c, 2);
        let mut s = Session::inference(&ps);
        let cur = s.tape.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let kf = s.tape.constant(Tensor::zeros(&[1, 8, 2, 4]));
        let r = temporal_layer(&mut s, &c, &temporal_prefix(2, 0), cur, KeySource::Keyframes(kf));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn reassemble_shapes_and_constants() {
        let c = cfg();
        let mut ps = params(&c, 4);
        let mut s = Session::inference(&ps);
        let tap = s.tape.constant(Tensor::full(&[2, 8, 4, 4], 0.3));
        let expected = [(16, 16), (8, 8), (4, 4), (2, 2)];
        for (site, &(h, w)) in expected.iter().enumerate() {
            let x = reassemble(&mut s, &c, tap, site).unwrap();
            assert_eq!(s.tape.shape(x), &[2, 8, h, w]);
            let v = s.tape.value(x);
            // constant input stays constant per channel
            for ch in 0..8 {
                let first = v.get(&[0, ch, 0, 0]);
                for y in 0..h {
                    for xx in 0..w {
                        assert!((v.get(&[1, ch, y, xx]) - first).abs() < 1e-14);
                    }
                }
            }
        }
        // identity 1x1 conv at scale 1 → channel remap only
        let eye = Tensor::from_fn(&[8, 8, 1, 1], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        *ps.get_mut("head.reassemble2.weight").unwrap() = eye;
        let mut s = Session::inference(&ps);
        let mut rng = Rng::new(5);
        let tv = rand(&[1, 8, 4, 4], &mut rng);
        let tap = s.tape.constant(tv.clone());
        let x = reassemble(&mut s, &c, tap, 2).unwrap();
        assert_eq!(s.tape.value(x), &tv);
    }

    #[test]
    fn fusion_with_identity_units_passes_finest_stream() {
        let c = cfg();
        let mut ps = params(&c, 6);
        for k in 0..4 {
            for unit in ["rcu_a", "rcu_b"] {
                for conv in ["conv1", "conv2"] {
                    let name = format!("head.fusion{k}.{unit}.{conv}.weight");
                    let shape = ps.get(&name).unwrap().shape().to_vec();
                    *ps.get_mut(&name).unwrap() = Tensor::zeros(&shape);
                }
            }
        }
        let mut s = Session::inference(&ps);
        let mut rng = Rng::new(7);
        let finest = rand(&[2, 8, 16, 16], &mut rng);
        let s0 = s.tape.constant(finest.clone());
        let s1 = s.tape.constant(Tensor::zeros(&[2, 8, 8, 8]));
        let s2 = s.tape.constant(Tensor::zeros(&[2, 8, 4, 4]));
        let s3 = s.tape.constant(Tensor::zeros(&[2, 8, 2, 2]));
        let f = fuse(&mut s, &[s0, s1, s2, s3]).unwrap();
        assert_eq!(s.tape.value(f), &finest);
    }

    #[test]
    fn every_fusion_stream_receives_gradient() {
        let c = cfg();
        let ps = params(&c, 8);
        let mut s = Session::inference(&ps);
        let mut rng = Rng::new(9);
        let shapes = [[1, 8, 16, 16], [1, 8, 8, 8], [1, 8, 4, 4], [1, 8, 2, 2]];
        let streams: Vec<Var> = shapes.iter().map(|sh| s.tape.leaf(rand(sh, &mut rng), true)).collect();
        let f = fuse(&mut s, &streams).unwrap();
        assert_eq!(s.tape.shape(f), &[1, 8, 16, 16]);
        let sq = s.tape.square(f);
        let l = s.tape.sum(sq);
        let g = s.tape.backward(l).unwrap();
        for &st in &streams {
            assert!(g.get(st).unwrap().data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn output_head_shape_and_positivity() {
        let c = cfg();
        let ps = params(&c, 10);
        let mut s = Session::inference(&ps);
        let mut rng = Rng::new(11);
        let one = rand(&[1, 8, 16, 16], &mut rng);
        let both = Tensor::concat0(&[&one, &one]).unwrap();
        let x = s.tape.constant(both);
        let d = output_head(&mut s, x, 32, 32).unwrap();
        let v = s.tape.value(d);
        assert_eq!(v.shape(), &[2, 1, 32, 32]);
        assert!(v.data().iter().all(|&e| e > 0.0));
        assert_eq!(v.index0(0), v.index0(1));
    }
}
