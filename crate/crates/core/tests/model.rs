use proptest::prelude::*;

use sdpt::encoder::EncoderConfig;
use sdpt::head::HeadConfig;
use sdpt::model::{Model, ModelConfig};
use sdpt::numerics::{Rng, Tensor};

fn model() -> Model {
    let cfg = ModelConfig::with_encoder(
        EncoderConfig { patch_size: 4, embed_dim: 8, depth: 4, num_heads: 2, tap_indices: [0, 1, 2, 3], ..Default::default() },
        HeadConfig { fusion_dim: 8, temporal_layers_per_site: 1, zero_init: false, ..HeadConfig::default() },
    );
    Model::new(cfg, 9).unwrap()
}

fn video(n: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(&[n, 3, 16, 16], |_| rng.uniform(0.0, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // Frames only read the keyframe cache, so any snippet length works and a
    // frame's depth does not depend on which frames share its snippet.
    #[test]
    fn snippet_length_does_not_change_per_frame_output(n in 1usize..7, m in 1usize..4, seed in 0u64..1000) {
        let model = model();
        let frames = video(n, seed);
        let keyframes = video(m, seed + 1);
        let joint = model.forward_video(&frames, &keyframes).unwrap();
        prop_assert_eq!(joint.shape(), &[n, 1, 16, 16][..]);
        prop_assert!(joint.data().iter().all(|v| v.is_finite()));
        let alone = model.forward_video(&frames.select0(&[n - 1]).unwrap(), &keyframes).unwrap();
        prop_assert!(joint.index0(n - 1).max_abs_diff(&alone.index0(0)) < 1e-12);
    }
}

#[test]
fn temporal_layers_use_the_keyframes() {
    let model = model();
    let frames = video(2, 1);
    let a = model.forward_video(&frames, &video(2, 2)).unwrap();
    let b = model.forward_video(&frames, &video(2, 3)).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-9);
}
