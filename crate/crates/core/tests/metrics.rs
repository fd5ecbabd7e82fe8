//! Metric values on constructed cases, fixed points and rank aggregation.

use sdpt::losses::{Granularity, Target};
use sdpt::metrics::{
    absrel, delta1, evaluate, opw, rank_methods, tc, tcc, EvalReport, EvalSpace, FlowField, MetricOptions,
};
use sdpt::numerics::{Rng, Tensor};
use sdpt::synth::{make_suite, SuiteConfig};

fn zero_flow(n: usize, h: usize, w: usize) -> FlowField {
    FlowField::new(Tensor::zeros(&[n - 1, 2, h, w]), Tensor::full(&[n - 1, 1, h, w], 1.0)).unwrap()
}

fn ramp(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(0.5, 2.0))
}

#[test]
fn absrel_and_delta1_constructions() {
    let mut rng = Rng::new(1);
    let gt = ramp(&mut rng, &[1, 1, 4, 4]);
    let t = Target::dense(&gt).unwrap();
    let scaled = gt.map(|v| 1.1 * v);
    let (raw, excluded) = absrel(&scaled, &t, EvalSpace::InverseDepth).unwrap();
    assert!((raw - 0.1).abs() < 1e-12 && excluded == 0);
    let opts = MetricOptions::default();
    let r = evaluate("x", &scaled, &t, None, None, &opts).unwrap();
    assert!(r.value("absrel").unwrap() < 1e-12);
    assert_eq!(delta1(&gt.map(|v| 1.3 * v), &t, EvalSpace::InverseDepth).unwrap(), 0.0);
    let half = Tensor::from_fn(gt.shape(), |i| gt.get(i) * if i[3] < 2 { 1.2 } else { 1.3 });
    assert_eq!(delta1(&half, &t, EvalSpace::InverseDepth).unwrap(), 50.0);
    assert_eq!(delta1(&gt, &t, EvalSpace::InverseDepth).unwrap(), 100.0);
}

#[test]
fn nonpositive_truth_is_excluded_and_counted() {
    let gt = Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, -1.0]).unwrap();
    let t = Target::dense(&gt).unwrap();
    let (_, excluded) = absrel(&gt, &t, EvalSpace::InverseDepth).unwrap();
    assert_eq!(excluded, 1);
}

#[test]
fn opw_zero_for_static_scene_and_exact_translation() {
    let c = Tensor::full(&[3, 1, 4, 4], 2.0);
    assert_eq!(opw(&c, &zero_flow(3, 4, 4)).unwrap().value, Some(0.0));
    // ramp d(x) = x moving right by one pixel per frame: d_{i+1}(x) = x − 1
    let (n, h, w) = (3, 3, 6);
    let d = Tensor::from_fn(&[n, 1, h, w], |i| i[3] as f64 - i[0] as f64);
    let flow = Tensor::from_fn(&[n - 1, 2, h, w], |i| if i[1] == 0 { 1.0 } else { 0.0 });
    let valid = Tensor::from_fn(&[n - 1, 1, h, w], |i| if i[3] + 1 < w { 1.0 } else { 0.0 });
    let ff = FlowField::new(flow, valid).unwrap();
    assert!(opw(&d, &ff).unwrap().value.unwrap() < 1e-15);
}

#[test]
fn opw_grows_with_flicker() {
    let mut rng = Rng::new(2);
    let base = ramp(&mut rng, &[1, 1, 5, 5]);
    let steady = Tensor::concat0(&[&base, &base, &base, &base]).unwrap();
    let bumped = base.map(|v| v * 1.3);
    let flicker = Tensor::concat0(&[&base, &bumped, &base, &base]).unwrap();
    let ff = zero_flow(4, 5, 5);
    assert!(opw(&flicker, &ff).unwrap().value.unwrap() > opw(&steady, &ff).unwrap().value.unwrap());
    assert!(tc(&flicker, &ff).unwrap().value.unwrap() < 1.0);
}

#[test]
fn tcc_near_zero_for_independent_changes() {
    let mut acc = 0.0;
    for seed in 0..12 {
        let mut rng = Rng::new(seed);
        let gt = ramp(&mut rng, &[2, 1, 32, 32]);
        let pred = ramp(&mut rng, &[2, 1, 32, 32]);
        let v = tcc(&pred, &Target::dense(&gt).unwrap(), &zero_flow(2, 32, 32)).unwrap().value.unwrap();
        assert!(v.abs() < 0.15, "seed {seed}: {v}");
        acc += v;
    }
    assert!((acc / 12.0).abs() < 0.05);
}

#[test]
fn tcc_skips_pairs_with_flat_prediction() {
    let mut rng = Rng::new(3);
    let gt = ramp(&mut rng, &[3, 1, 4, 4]);
    let pred = Tensor::full(&[3, 1, 4, 4], 1.0);
    let r = tcc(&pred, &Target::dense(&gt).unwrap(), &zero_flow(3, 4, 4)).unwrap();
    assert_eq!(r.value, None);
    assert_eq!(r.skipped, 2);
}

#[test]
fn missing_flow_marks_metrics_skipped() {
    let mut rng = Rng::new(4);
    let gt = ramp(&mut rng, &[3, 1, 4, 4]);
    let frames = Tensor::zeros(&[3, 3, 4, 4]);
    let r = evaluate("x", &gt, &Target::dense(&gt).unwrap(), Some(&frames), None, &MetricOptions::default()).unwrap();
    assert!(r.value("tgm").is_some());
    for m in ["opw", "tc", "tcc", "tmc"] {
        assert!(r.metrics[m].value.is_none());
        assert!(r.metrics[m].note.as_deref().unwrap().contains("skipped"));
    }
    let single = gt.select0(&[0]).unwrap();
    let r = evaluate("x", &single, &Target::dense(&single).unwrap(), None, None, &MetricOptions::default()).unwrap();
    assert!(r.value("tgm").is_none() && r.value("absrel").is_some());
}

#[test]
fn metrics_invariant_under_affine_maps_when_aligned() {
    let suite = make_suite(5, &SuiteConfig { height: 16, width: 16, frames: 6 }).unwrap();
    let opts = MetricOptions::default();
    for clip in suite.iter().take(4) {
        let t = Target::dense(&clip.disparity).unwrap();
        let mut rng = Rng::new(9);
        let noise: Vec<f64> = clip.disparity.data().iter().map(|v| v + rng.uniform(-0.02, 0.02)).collect();
        let pred = Tensor::new(clip.disparity.shape(), noise).unwrap();
        let moved = pred.map(|v| 3.0 * v + 0.5);
        let a = evaluate("a", &pred, &t, Some(&clip.frames), Some(&clip.flow), &opts).unwrap();
        let b = evaluate("b", &moved, &t, Some(&clip.frames), Some(&clip.flow), &opts).unwrap();
        for (name, v) in &a.metrics {
            let Some(x) = v.value else {
                assert!(b.value(name).is_none(), "{name}");
                continue;
            };
            let y = b.value(name).unwrap();
            assert!((x - y).abs() <= 1e-8 * (1.0 + x.abs()), "{} {name}: {x} vs {y}", clip.name);
        }
    }
}

#[test]
fn per_frame_alignment_option_is_honoured() {
    let mut rng = Rng::new(6);
    let gt = ramp(&mut rng, &[2, 1, 3, 3]);
    let mut p = gt.data().to_vec();
    for v in &mut p[9..] {
        *v = *v * 4.0 + 1.0;
    }
    let pred = Tensor::new(gt.shape(), p).unwrap();
    let t = Target::dense(&gt).unwrap();
    let opts = MetricOptions { alignment: Some(Granularity::PerFrame), ..MetricOptions::default() };
    let r = evaluate("x", &pred, &t, None, None, &opts).unwrap();
    assert!(r.value("absrel").unwrap() < 1e-12);
    assert_eq!(r.alignment.scale.len(), 2);
}

#[test]
fn rank_trivial_cases() {
    let one = EvalReport::from_values("a", &[("absrel", 0.1), ("delta1", 90.0)]).unwrap();
    assert_eq!(rank_methods(std::slice::from_ref(&one)).unwrap(), vec![1.0]);
    let better = EvalReport::from_values("b", &[("absrel", 0.05), ("delta1", 95.0)]).unwrap();
    assert_eq!(rank_methods(&[one, better]).unwrap(), vec![2.0, 1.0]);
}

#[test]
fn report_json_has_stable_keys() {
    let r = EvalReport::from_values("m", &[("tgm", 0.2)]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(v["metrics"]["tgm"]["value"], 0.2);
    assert_eq!(v["metrics"]["tgm"]["direction"], "lower");
    assert!(v.get("alignment").is_some());
}
