#![no_main]

use libfuzzer_sys::fuzz_target;
use sdpt::io::checkpoint::{decode_features, encode_features};

fuzz_target!(|data: &[u8]| {
    if let Ok(fv) = decode_features(data) {
        let again = decode_features(&encode_features(&fv).unwrap()).unwrap();
        for (a, b) in fv.taps.iter().zip(&again.taps) {
            assert_eq!(a.data(), b.data());
        }
    }
});
