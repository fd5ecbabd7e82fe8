//! Round trips and corruption handling for every on-disk format.

use proptest::prelude::*;
use sdpt::encoder::{FeatureSource, FeatureVolume};
use sdpt::io::checkpoint::{self, Checkpoint, Container};
use sdpt::io::{flo5, pfm, ppm, xtslice};
use sdpt::model::{Model, ModelConfig};
use sdpt::numerics::{ParamSet, Tensor};

fn any_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

fn f32_exact() -> impl Strategy<Value = f64> {
    any::<f32>().prop_filter("finite", |v| v.is_finite()).prop_map(|v| v as f64)
}

proptest! {
    #[test]
    fn ppm_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = sdpt::numerics::Rng::new(seed);
        let img = Tensor::from_fn(&[3, h, w], |_| rng.below(0, 256) as f64 / 255.0);
        let back = ppm::decode(&ppm::encode(&img).unwrap()).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn pfm_round_trip(h in 1usize..6, w in 1usize..6, vals in proptest::collection::vec(f32_exact(), 36)) {
        let map = Tensor::new(&[1, h, w], vals[..h * w].to_vec()).unwrap();
        let back = pfm::decode(&pfm::encode(&map).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(map.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn flo5_round_trip(h in 1usize..5, w in 1usize..5, vals in proptest::collection::vec(f32_exact(), 32), mask in proptest::collection::vec(any::<bool>(), 16)) {
        let flow = Tensor::new(&[2, h, w], vals[..2 * h * w].to_vec()).unwrap();
        let valid = Tensor::new(&[1, h, w], mask[..h * w].iter().map(|&m| m as u8 as f64).collect()).unwrap();
        let (f, v) = flo5::decode(&flo5::encode(&flow, &valid).unwrap()).unwrap();
        for (a, b) in f.data().iter().zip(flow.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(v, valid);
    }

    #[test]
    fn container_round_trip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 1..4), 0..5), vals in proptest::collection::vec(any_f64(), 64)) {
        let mut k = 0;
        let tensors: Vec<(String, Tensor)> = shapes.iter().enumerate().map(|(i, s)| {
            let t = Tensor::from_fn(s, |_| { k += 1; vals[k % vals.len()] });
            (format!("t{i}"), t)
        }).collect();
        let c = Container { meta: serde_json::json!({"k": shapes.len()}), tensors };
        let back = checkpoint::decode(&checkpoint::encode(&c).unwrap()).unwrap();
        prop_assert_eq!(back.tensors.len(), c.tensors.len());
        for ((n1, a), (n2, b)) in back.tensors.iter().zip(&c.tensors) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = ppm::decode(&bytes);
        let _ = pfm::decode(&bytes);
        let _ = flo5::decode(&bytes);
        let _ = checkpoint::decode(&bytes);
        let _ = checkpoint::decode_features(&bytes);
    }
}

fn small_checkpoint() -> Checkpoint {
    let cfg = ModelConfig::with_encoder(
        sdpt::encoder::EncoderConfig { embed_dim: 4, depth: 4, num_heads: 1, tap_indices: [0, 1, 2, 3], ..Default::default() },
        sdpt::head::HeadConfig { fusion_dim: 4, head_hidden: 4, ..Default::default() },
    );
    let m = Model::new(cfg.clone(), 3).unwrap();
    let mut adam_m = ParamSet::new();
    let mut adam_v = ParamSet::new();
    for (n, t) in m.params.iter() {
        adam_m.insert(n.clone(), t.map(|v| v * 0.5));
        adam_v.insert(n.clone(), t.map(|v| v * v));
    }
    Checkpoint { config: cfg, step: 17, params: m.params, adam_m, adam_v, extra: serde_json::json!({"note": 1}) }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ck = small_checkpoint();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("a/b.sdpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    for (n, t) in ck.params.iter() {
        let b = back.params.get(n).unwrap();
        assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn every_single_bit_flip_in_payload_is_detected() {
    let bytes = small_checkpoint().to_bytes().unwrap();
    // payload sits between the u64 length field and the 4-byte checksum
    let n = bytes.len();
    let payload_bytes = small_checkpoint()
        .params
        .num_scalars() * 8 * 3;
    let start = n - 4 - payload_bytes;
    for byte in start..n - 4 {
        for bit in 0..8 {
            let mut b = bytes.clone();
            b[byte] ^= 1 << bit;
            assert!(Checkpoint::from_bytes(&b).is_err(), "flip at byte {byte} bit {bit} went unnoticed");
        }
    }
}

#[test]
fn header_corruption_is_detected() {
    let bytes = small_checkpoint().to_bytes().unwrap();
    for byte in 0..64 {
        let mut b = bytes.clone();
        b[byte] ^= 0x10;
        assert!(Checkpoint::from_bytes(&b).is_err(), "flip at byte {byte}");
    }
}

#[test]
fn version_mismatch_is_explicit() {
    let mut bytes = small_checkpoint().to_bytes().unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    let e = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
    assert!(e.contains("version 2"), "{e}");
}

#[test]
fn truncation_is_rejected() {
    let bytes = small_checkpoint().to_bytes().unwrap();
    for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn pfm_rejects_nan_and_reads_big_endian() {
    let mut b = b"Pf\n1 1\n-1.0\n".to_vec();
    b.extend_from_slice(&f32::NAN.to_le_bytes());
    assert!(pfm::decode(&b).is_err());
    let mut be = b"Pf\n2 1\n1.0\n".to_vec();
    be.extend_from_slice(&1.5f32.to_be_bytes());
    be.extend_from_slice(&(-2.0f32).to_be_bytes());
    assert_eq!(pfm::decode(&be).unwrap().data(), &[1.5, -2.0]);
}

#[test]
fn feature_import_rejects_wrong_tap_count() {
    let t = Tensor::zeros(&[1, 2, 2, 2]);
    let c = Container { meta: serde_json::json!({"kind": "features"}), tensors: vec![("tap0".into(), t.clone()), ("tap1".into(), t)] };
    assert!(checkpoint::decode_features(&checkpoint::encode(&c).unwrap()).is_err());
    let fv = FeatureVolume::new(vec![Tensor::zeros(&[1, 2, 2, 2]); 4], FeatureSource::Computed).unwrap();
    let back = checkpoint::decode_features(&checkpoint::encode_features(&fv).unwrap()).unwrap();
    assert_eq!(back.source, FeatureSource::Imported);
}

#[test]
fn xtslice_static_video_has_identical_rows() {
    let frame = Tensor::from_fn(&[1, 1, 4, 5], |i| (i[2] * 5 + i[3]) as f64);
    let refs = vec![&frame; 6];
    let video = Tensor::concat0(&refs).unwrap();
    let img = xtslice::render_pgm(&video, 2).unwrap();
    let px = &img[img.len() - 30..];
    for r in 1..6 {
        assert_eq!(&px[r * 5..r * 5 + 5], &px[..5]);
    }
    assert!(xtslice::render_pgm(&video, 4).unwrap_err().to_string().contains("0..=3"));
}
