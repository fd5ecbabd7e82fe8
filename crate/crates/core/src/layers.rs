//! Parameter initialisation and the small layer vocabulary shared by the
//! encoder and head: linear maps, convolutions, layer norms.
//!
//! Parameters are addressed by dotted names: a layer called `prefix` owns
//! `prefix.weight` and `prefix.bias`.

use crate::error::Result;
use crate::numerics::{ParamSet, Rng, Session, Tensor, Var};

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Glorot-uniform `[in, out]` weight and zero bias.
pub fn init_linear(ps: &mut ParamSet, prefix: &str, inp: usize, out: usize, rng: &mut Rng) {
    let bound = (6.0 / (inp + out) as f64).sqrt();
    ps.insert(format!("{prefix}.weight"), uniform(&[inp, out], bound, rng));
    ps.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]));
}

/// Linear layer with all-zero weight and bias.
pub fn init_linear_zero(ps: &mut ParamSet, prefix: &str, inp: usize, out: usize) {
    ps.insert(format!("{prefix}.weight"), Tensor::zeros(&[inp, out]));
    ps.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]));
}

/// Uniform `[out, in, k, k]` kernel scaled by fan-in, zero bias.
pub fn init_conv(ps: &mut ParamSet, prefix: &str, inp: usize, out: usize, k: usize, rng: &mut Rng) {
    let bound = (3.0 / (inp * k * k) as f64).sqrt();
    ps.insert(format!("{prefix}.weight"), uniform(&[out, inp, k, k], bound, rng));
    ps.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]));
}

pub fn init_layernorm(ps: &mut ParamSet, prefix: &str, dim: usize) {
    ps.insert(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0));
    ps.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
}

/// `x · W + b` over the last axis.
pub fn linear(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let b = s.param(&format!("{prefix}.bias"))?;
    let y = s.tape.matmul(x, w)?;
    s.tape.add(y, b)
}

pub fn conv(s: &mut Session, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let b = s.param(&format!("{prefix}.bias"))?;
    s.tape.conv2d(x, w, Some(b), stride, pad)
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over the last axis.
pub fn layernorm(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let g = s.param(&format!("{prefix}.gamma"))?;
    let b = s.param(&format!("{prefix}.beta"))?;
    let axis = s.tape.shape(x).len() - 1;
    s.tape.layernorm(x, g, b, axis, LN_EPS)
}

/// Two-layer GELU feed-forward block with expansion 4.
pub fn init_ffn(ps: &mut ParamSet, prefix: &str, dim: usize, rng: &mut Rng) {
    init_linear(ps, &format!("{prefix}.fc1"), dim, 4 * dim, rng);
    init_linear(ps, &format!("{prefix}.fc2"), 4 * dim, dim, rng);
}

pub fn ffn(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(s, &format!("{prefix}.fc1"), x)?;
    let h = s.tape.gelu(h);
    linear(s, &format!("{prefix}.fc2"), h)
}
