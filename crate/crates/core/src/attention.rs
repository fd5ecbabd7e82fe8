//! Multi-head scaled dot-product attention and the temporal token layout.
//!
//! The temporal layout turns a `[t, c, h, w]` feature stack into
//! `[h·w, t, c]`: one attention batch per spatial patch, with time as the
//! sequence axis. Attention over that layout can mix information across time
//! but never across patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers;
use crate::numerics::{ParamSet, Rng, Session, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, num_heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            embed_dim,
            num_heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Q, K, V and output projections (`{prefix}.q`, `.k`, `.v`, `.o`), all with bias.
pub fn init_attention(ps: &mut ParamSet, prefix: &str, cfg: &AttentionConfig, rng: &mut Rng) {
    for p in ["q", "k", "v", "o"] {
        layers::init_linear(ps, &format!("{prefix}.{p}"), cfg.embed_dim, cfg.embed_dim, rng);
    }
}

/// Output of [`multihead_attention_weights`].
pub struct AttentionOutput {
    /// `[b, t_q, c]`
    pub output: Var,
    /// Softmax weights `[b, heads, t_q, t_kv]`.
    pub weights: Var,
}

/// Cross-attention of `q_src[b, t_q, c]` onto `kv_src[b, t_kv, c]`.
///
/// Per head: `softmax(Q Kᵀ / √head_dim) V`; heads are concatenated and
/// passed through the output projection. Self-attention is `kv_src == q_src`.
pub fn multihead_attention(
    s: &mut Session,
    prefix: &str,
    q_src: Var,
    kv_src: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    Ok(multihead_attention_weights(s, prefix, q_src, kv_src, cfg)?.output)
}

pub fn multihead_attention_weights(
    s: &mut Session,
    prefix: &str,
    q_src: Var,
    kv_src: Var,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    let (b, tq, c) = dims3(&s.tape, q_src, "query source")?;
    let (bk, tkv, ck) = dims3(&s.tape, kv_src, "key/value source")?;
    if c != cfg.embed_dim || ck != cfg.embed_dim {
        return Err(Error::config(format!(
            "attention embed_dim {} does not match inputs with {c} / {ck} channels",
            cfg.embed_dim
        )));
    }
    if b != bk {
        return Err(Error::shape(format!(
            "attention batch extents differ: {b} vs {bk}"
        )));
    }
    let (h, d) = (cfg.num_heads, cfg.head_dim());

    let q = layers::linear(s, &format!("{prefix}.q"), q_src)?;
    let k = layers::linear(s, &format!("{prefix}.k"), kv_src)?;
    let v = layers::linear(s, &format!("{prefix}.v"), kv_src)?;

    let q = split_heads(&mut s.tape, q, b, tq, h, d)?;
    let k = split_heads(&mut s.tape, k, b, tkv, h, d)?;
    let v = split_heads(&mut s.tape, v, b, tkv, h, d)?;

    let kt = s.tape.transpose_last(k)?;
    let scores = s.tape.matmul(q, kt)?;
    let scores = s.tape.mul_const(scores, 1.0 / (d as f64).sqrt());
    let weights = s.tape.softmax(scores, 3)?;
    let ctx = s.tape.matmul(weights, v)?;

    let ctx = s.tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = s.tape.reshape(ctx, &[b, tq, c])?;
    let output = layers::linear(s, &format!("{prefix}.o"), ctx)?;
    Ok(AttentionOutput { output, weights })
}

fn dims3(tape: &Tape, x: Var, what: &str) -> Result<(usize, usize, usize)> {
    match tape.shape(x) {
        &[a, b, c] => Ok((a, b, c)),
        other => Err(Error::shape(format!("{what} must be [batch, seq, channels], got {other:?}"))),
    }
}

fn split_heads(tape: &mut Tape, x: Var, b: usize, t: usize, h: usize, d: usize) -> Result<Var> {
    let x = tape.reshape(x, &[b, t, h, d])?;
    tape.permute(x, &[0, 2, 1, 3])
}

/// `[t, c, h, w]` → `[h·w, t, c]`; patches enumerated row-major.
pub fn to_temporal_tokens(tape: &mut Tape, f: Var) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    let [t, c, h, w] = shape[..] else {
        return Err(Error::shape(format!(
            "temporal features must be [t, c, h, w], got {shape:?}"
        )));
    };
    let x = tape.reshape(f, &[t, c, h * w])?;
    tape.permute(x, &[2, 0, 1])
}

/// Inverse of [`to_temporal_tokens`].
pub fn from_temporal_tokens(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [p, t, c] = shape[..] else {
        return Err(Error::shape(format!(
            "temporal tokens must be [patches, t, c], got {shape:?}"
        )));
    };
    if p != h * w {
        return Err(Error::shape(format!(
            "token groups {p} do not match a {h}x{w} grid"
        )));
    }
    let x = tape.permute(x, &[1, 2, 0])?;
    tape.reshape(x, &[t, c, h, w])
}

/// Fixed sinusoidal code for sequence slot `pos` across `dim` channels.
pub fn sinusoidal_code(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * rate;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}
