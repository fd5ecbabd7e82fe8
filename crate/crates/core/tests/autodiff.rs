//! Every differentiable op against central finite differences on random
//! small shapes, one case per seed.

use sdpt::numerics::{relative_error, Rng, Tape, Tensor, Var};
use sdpt::Result;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 60;

type Graph = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Contracts `f(inputs)` with a fixed random weight tensor to get a scalar.
fn scalarize(f: &Graph, inputs: &[Tensor], weights: &mut Option<Tensor>, seed: u64, grad: bool) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let y = f(&mut tape, &vars).unwrap();
    let w = weights
        .get_or_insert_with(|| {
            let mut rng = Rng::new(seed ^ 0xABCD);
            Tensor::from_fn(tape.shape(y), |_| rng.uniform(-1.0, 1.0))
        })
        .clone();
    let wv = tape.constant(w);
    let p = tape.mul(y, wv).unwrap();
    let loss = tape.sum(p);
    let value = tape.value(loss).item();
    if !grad {
        return (value, vec![]);
    }
    let mut g = tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, grads)
}

fn check(name: &str, seed: u64, inputs: Vec<Tensor>, f: &Graph) {
    let mut weights = None;
    let (_, analytic) = scalarize(f, &inputs, &mut weights, seed, true);
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.numel() {
            let mut probe = inputs.clone();
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + EPS;
            let (fp, _) = scalarize(f, &probe, &mut weights, seed, false);
            probe[k].data_mut()[i] = orig - EPS;
            let (fm, _) = scalarize(f, &probe, &mut weights, seed, false);
            let numeric = (fp - fm) / (2.0 * EPS);
            let a = analytic[k].data()[i];
            let e = relative_error(a, numeric);
            assert!(
                e <= TOL,
                "{name} seed {seed}: input {k} coord {i}: analytic {a}, numeric {numeric}, rel err {e}"
            );
        }
    }
}

fn rand_t(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform(0.1, 2.0);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dims(rng: &mut Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.below(1, 4)).collect()
}

#[test]
fn elementwise_binary_ops_with_broadcast() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let shape = dims(&mut rng, 3);
        // broadcast the second operand along a random axis
        let mut bshape = shape.clone();
        bshape[rng.below(0, 3)] = 1;
        let a = rand_t(&mut rng, &shape, -2.0, 2.0);
        let b = rand_t(&mut rng, &bshape, -2.0, 2.0);
        let pos = rand_t(&mut rng, &bshape, 0.5, 2.0);
        check("add", seed, vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]));
        check("sub", seed, vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]));
        check("mul", seed, vec![a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]));
        check("div", seed, vec![a.clone(), pos], &|t, v| t.div(v[0], v[1]));
    }
}

#[test]
fn elementwise_unary_ops() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let shape = dims(&mut rng, 2);
        let x = rand_t(&mut rng, &shape, -2.0, 2.0);
        let nz = away_from_zero(&mut rng, &shape);
        let pos = rand_t(&mut rng, &shape, 0.2, 3.0);
        let c = rng.uniform(-2.0, 2.0);
        check("add_const", seed, vec![x.clone()], &move |t, v| Ok(t.add_const(v[0], c)));
        check("mul_const", seed, vec![x.clone()], &move |t, v| Ok(t.mul_const(v[0], c)));
        check("neg", seed, vec![x.clone()], &|t, v| Ok(t.neg(v[0])));
        check("abs", seed, vec![nz.clone()], &|t, v| Ok(t.abs(v[0])));
        check("relu", seed, vec![nz], &|t, v| Ok(t.relu(v[0])));
        check("square", seed, vec![x.clone()], &|t, v| Ok(t.square(v[0])));
        check("sqrt", seed, vec![pos], &|t, v| Ok(t.sqrt(v[0])));
        check("gelu", seed, vec![x.clone()], &|t, v| Ok(t.gelu(v[0])));
        check("softplus", seed, vec![x.clone()], &|t, v| Ok(t.softplus(v[0])));
        check("exp", seed, vec![x], &|t, v| Ok(t.exp(v[0])));
    }
}

#[test]
fn reductions() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let shape = dims(&mut rng, 3);
        let x = rand_t(&mut rng, &shape, -2.0, 2.0);
        let axis = rng.below(0, 3);
        check("sum", seed, vec![x.clone()], &|t, v| Ok(t.sum(v[0])));
        check("mean", seed, vec![x.clone()], &|t, v| Ok(t.mean(v[0])));
        check("sum_axis", seed, vec![x], &move |t, v| t.sum_axis(v[0], axis));
    }
}

#[test]
fn matmul_batched() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let (b, m, k, n) = (rng.below(1, 3), rng.below(1, 4), rng.below(1, 4), rng.below(1, 4));
        let a = rand_t(&mut rng, &[b, m, k], -1.0, 1.0);
        let bb = rand_t(&mut rng, &[b, k, n], -1.0, 1.0);
        check("matmul", seed, vec![a, bb], &|t, v| t.matmul(v[0], v[1]));
    }
}

#[test]
fn softmax_and_layernorm() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let mut shape = dims(&mut rng, 3);
        let axis = rng.below(0, 3);
        shape[axis] = rng.below(2, 5);
        let x = rand_t(&mut rng, &shape, -3.0, 3.0);
        check("softmax", seed, vec![x.clone()], &move |t, v| t.softmax(v[0], axis));
        let len = shape[axis];
        let g = rand_t(&mut rng, &[len], 0.5, 1.5);
        let b = rand_t(&mut rng, &[len], -0.5, 0.5);
        check("layernorm", seed, vec![x, g, b], &move |t, v| t.layernorm(v[0], v[1], v[2], axis, 1e-5));
    }
}

#[test]
fn conv_and_resize() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let (n, c, o) = (rng.below(1, 3), rng.below(1, 3), rng.below(1, 3));
        let k = rng.below(1, 4);
        let stride = rng.below(1, 3);
        let pad = rng.below(0, k);
        let (h, w) = (rng.below(k, 6), rng.below(k, 6));
        let x = rand_t(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let wt = rand_t(&mut rng, &[o, c, k, k], -1.0, 1.0);
        let b = rand_t(&mut rng, &[o], -1.0, 1.0);
        check("conv2d", seed, vec![x.clone(), wt, b], &move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad));
        let (oh, ow) = (rng.below(1, 8), rng.below(1, 8));
        check("resize_bilinear", seed, vec![x], &move |t, v| t.resize_bilinear(v[0], oh, ow));
    }
}

#[test]
fn layout_ops() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let shape = dims(&mut rng, 3);
        let x = rand_t(&mut rng, &shape, -1.0, 1.0);
        let total: usize = shape.iter().product();
        check("reshape", seed, vec![x.clone()], &move |t, v| t.reshape(v[0], &[total]));
        let mut perm = vec![0, 1, 2];
        rng.shuffle(&mut perm);
        let p2 = perm.clone();
        check("permute", seed, vec![x.clone()], &move |t, v| t.permute(v[0], &p2));
        check("transpose_last", seed, vec![x.clone()], &|t, v| t.transpose_last(v[0]));
        let axis = rng.below(0, 3);
        let mut yshape = shape.clone();
        yshape[axis] = rng.below(1, 3);
        let y = rand_t(&mut rng, &yshape, -1.0, 1.0);
        check("concat", seed, vec![x.clone(), y], &move |t, v| t.concat(&[v[0], v[1]], axis));
        // repeated indices must accumulate gradient
        let idx: Vec<usize> = (0..rng.below(1, 5)).map(|_| rng.below(0, shape[axis])).collect();
        check("select", seed, vec![x], &move |t, v| t.select(v[0], axis, &idx));
    }
}

#[test]
fn composite_graph_reuses_inputs() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let x = rand_t(&mut rng, &[2, 3], -1.0, 1.0);
        let w = rand_t(&mut rng, &[3, 3], -1.0, 1.0);
        check("composite", seed, vec![x, w], &|t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.gelu(h);
            let s = t.softmax(h, 1)?;
            let r = t.mul(s, v[0])?;
            t.add(r, v[0])
        });
    }
}
