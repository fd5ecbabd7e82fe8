#![no_main]

use libfuzzer_sys::fuzz_target;
use sdpt::io::ppm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = ppm::decode(data) {
        // inputs with maxval below 255 are requantised on the first encode
        let bytes = ppm::encode(&img).unwrap();
        let again = ppm::decode(&bytes).unwrap();
        assert!(img.max_abs_diff(&again) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(ppm::encode(&again).unwrap(), bytes);
    }
});
