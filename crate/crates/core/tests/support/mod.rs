//! Reference implementations shared by several test targets.
#![allow(dead_code)]

use sdpt::attention::{init_attention, AttentionConfig};
use sdpt::numerics::{ParamSet, Rng, Tensor};

pub fn linear_ref(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (inp, out) = (w.shape()[0], w.shape()[1]);
    (0..out)
        .map(|j| b.data()[j] + (0..inp).map(|i| x[i] * w.data()[i * out + j]).sum::<f64>())
        .collect()
}

/// Straightforward nested-loop attention: projections, per-head softmax of
/// scaled dot products, weighted sum of values, output projection.
pub fn attention_ref(ps: &ParamSet, q_src: &Tensor, kv_src: &Tensor, heads: usize) -> Tensor {
    let [b, tq, c] = q_src.shape()[..] else { panic!() };
    let tkv = kv_src.shape()[1];
    let d = c / heads;
    let p = |n: &str| (ps.get(&format!("a.{n}.weight")).unwrap(), ps.get(&format!("a.{n}.bias")).unwrap());
    let row = |t: &Tensor, bi: usize, i: usize, len: usize| t.data()[(bi * len + i) * c..(bi * len + i + 1) * c].to_vec();
    let mut out = Vec::with_capacity(b * tq * c);
    for bi in 0..b {
        let ks: Vec<Vec<f64>> = (0..tkv).map(|j| { let (w, bb) = p("k"); linear_ref(&row(kv_src, bi, j, tkv), w, bb) }).collect();
        let vs: Vec<Vec<f64>> = (0..tkv).map(|j| { let (w, bb) = p("v"); linear_ref(&row(kv_src, bi, j, tkv), w, bb) }).collect();
        for i in 0..tq {
            let (w, bb) = p("q");
            let q = linear_ref(&row(q_src, bi, i, tq), w, bb);
            let mut ctx = vec![0.0; c];
            for h in 0..heads {
                let mut scores = vec![0.0; tkv];
                for j in 0..tkv {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += q[h * d + k] * ks[j][h * d + k];
                    }
                    scores[j] = s / (d as f64).sqrt();
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..tkv {
                    for k in 0..d {
                        ctx[h * d + k] += e[j] / z * vs[j][h * d + k];
                    }
                }
            }
            let (w, bb) = p("o");
            out.extend(linear_ref(&ctx, w, bb));
        }
    }
    Tensor::new(&[b, tq, c], out).unwrap()
}

pub fn random_params(c: usize, rng: &mut Rng) -> ParamSet {
    let mut ps = ParamSet::new();
    init_attention(&mut ps, "a", &AttentionConfig::new(c, 1).unwrap(), rng);
    // non-zero biases so they are exercised too
    let names: Vec<String> = ps.names().filter(|n| n.ends_with("bias")).cloned().collect();
    for n in names {
        let t = ps.get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    ps
}

