//! Multi-head attention against a loop-by-loop reference, plus the temporal
//! token layout.

use proptest::prelude::*;
use sdpt::attention::{
    from_temporal_tokens, multihead_attention, multihead_attention_weights, to_temporal_tokens,
    AttentionConfig,
};
use sdpt::numerics::{Rng, Session, Tape, Tensor};

mod support;

use support::{attention_ref, linear_ref, random_params};

#[test]
fn matches_loop_oracle_on_random_instances() {
    for seed in 0..150u64 {
        let mut rng = Rng::new(seed);
        let heads = rng.below(1, 4);
        let c = heads * rng.below(1, 4);
        let (b, tq, tkv) = (rng.below(1, 4), rng.below(1, 6), rng.below(1, 6));
        let ps = random_params(c, &mut rng);
        let q = Tensor::from_fn(&[b, tq, c], |_| rng.uniform(-2.0, 2.0));
        let kv = Tensor::from_fn(&[b, tkv, c], |_| rng.uniform(-2.0, 2.0));
        let cfg = AttentionConfig::new(c, heads).unwrap();
        let mut s = Session::inference(&ps);
        let qv = s.tape.constant(q.clone());
        let kvv = s.tape.constant(kv.clone());
        let y = multihead_attention(&mut s, "a", qv, kvv, &cfg).unwrap();
        let want = attention_ref(&ps, &q, &kv, heads);
        let diff = s.tape.value(y).max_abs_diff(&want);
        assert!(diff <= 1e-10, "seed {seed}: max diff {diff}");
    }
}

#[test]
fn spec_sized_instance_2x5x8() {
    let mut rng = Rng::new(77);
    let ps = random_params(8, &mut rng);
    let q = Tensor::from_fn(&[2, 5, 8], |_| rng.uniform(-1.0, 1.0));
    let kv = Tensor::from_fn(&[2, 5, 8], |_| rng.uniform(-1.0, 1.0));
    let mut s = Session::inference(&ps);
    let (qv, kvv) = (s.tape.constant(q.clone()), s.tape.constant(kv.clone()));
    let y = multihead_attention(&mut s, "a", qv, kvv, &AttentionConfig::new(8, 2).unwrap()).unwrap();
    assert!(s.tape.value(y).max_abs_diff(&attention_ref(&ps, &q, &kv, 2)) <= 1e-10);
}

#[test]
fn single_key_gives_projected_value() {
    let mut rng = Rng::new(5);
    let ps = random_params(4, &mut rng);
    let q = Tensor::from_fn(&[1, 3, 4], |_| rng.uniform(-1.0, 1.0));
    let kv = Tensor::from_fn(&[1, 1, 4], |_| rng.uniform(-1.0, 1.0));
    let mut s = Session::inference(&ps);
    let (qv, kvv) = (s.tape.constant(q), s.tape.constant(kv.clone()));
    let y = multihead_attention(&mut s, "a", qv, kvv, &AttentionConfig::new(4, 2).unwrap()).unwrap();
    let v = linear_ref(kv.data(), ps.get("a.v.weight").unwrap(), ps.get("a.v.bias").unwrap());
    let o = linear_ref(&v, ps.get("a.o.weight").unwrap(), ps.get("a.o.bias").unwrap());
    let y = s.tape.value(y);
    for i in 0..3 {
        for k in 0..4 {
            assert!((y.data()[i * 4 + k] - o[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn key_order_does_not_matter() {
    let mut rng = Rng::new(9);
    let ps = random_params(6, &mut rng);
    let q = Tensor::from_fn(&[2, 3, 6], |_| rng.uniform(-1.0, 1.0));
    let kv = Tensor::from_fn(&[2, 4, 6], |_| rng.uniform(-1.0, 1.0));
    let cfg = AttentionConfig::new(6, 3).unwrap();
    let run = |kv: Tensor| {
        let mut s = Session::inference(&ps);
        let (qv, kvv) = (s.tape.constant(q.clone()), s.tape.constant(kv));
        let y = multihead_attention(&mut s, "a", qv, kvv, &cfg).unwrap();
        s.tape.value(y).clone()
    };
    let permuted = kv.select_axis(1, &[2, 0, 3, 1]).unwrap();
    assert!(run(kv).max_abs_diff(&run(permuted)) < 1e-12);
}

proptest! {
    #[test]
    fn weights_sum_to_one(seed in 0u64..1000, heads in 1usize..4, tq in 1usize..5, tkv in 1usize..6) {
        let mut rng = Rng::new(seed);
        let c = heads * 2;
        let ps = random_params(c, &mut rng);
        let q = Tensor::from_fn(&[1, tq, c], |_| rng.uniform(-5.0, 5.0));
        let kv = Tensor::from_fn(&[1, tkv, c], |_| rng.uniform(-5.0, 5.0));
        let mut s = Session::inference(&ps);
        let (qv, kvv) = (s.tape.constant(q), s.tape.constant(kv));
        let out = multihead_attention_weights(&mut s, "a", qv, kvv, &AttentionConfig::new(c, heads).unwrap()).unwrap();
        let w = s.tape.value(out.weights);
        for row in w.data().chunks(tkv) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn temporal_layout_round_trips(t in 1usize..4, c in 1usize..4, h in 1usize..4, w in 1usize..4, seed in 0u64..100) {
        let mut rng = Rng::new(seed);
        let f = Tensor::from_fn(&[t, c, h, w], |_| rng.uniform(-1.0, 1.0));
        let mut tape = Tape::new();
        let x = tape.constant(f.clone());
        let tok = to_temporal_tokens(&mut tape, x).unwrap();
        prop_assert_eq!(tape.shape(tok), &[h * w, t, c]);
        let tv = tape.value(tok).clone();
        for p in 0..h * w {
            for i in 0..t {
                for k in 0..c {
                    prop_assert_eq!(tv.get(&[p, i, k]), f.get(&[i, k, p / w, p % w]));
                }
            }
        }
        let back = from_temporal_tokens(&mut tape, tok, h, w).unwrap();
        prop_assert_eq!(tape.value(back), &f);
    }
}

#[test]
fn constant_frames_become_time_ramps() {
    let f = Tensor::from_fn(&[4, 2, 2, 3], |i| i[0] as f64);
    let mut tape = Tape::new();
    let x = tape.constant(f);
    let tok = to_temporal_tokens(&mut tape, x).unwrap();
    let tv = tape.value(tok);
    for p in 0..6 {
        for i in 0..4 {
            assert_eq!(tv.get(&[p, i, 1]), i as f64);
        }
    }
}
