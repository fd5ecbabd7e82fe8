#![no_main]

use libfuzzer_sys::fuzz_target;
use sdpt::io::pfm;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = pfm::decode(data) {
        // decoded values are f32, so the round trip is exact
        let again = pfm::decode(&pfm::encode(&map).unwrap()).unwrap();
        assert_eq!(map.data(), again.data());
    }
});
