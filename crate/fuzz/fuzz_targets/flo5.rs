#![no_main]

use libfuzzer_sys::fuzz_target;
use sdpt::io::flo5;

fuzz_target!(|data: &[u8]| {
    if let Ok((flow, valid)) = flo5::decode(data) {
        let (f2, v2) = flo5::decode(&flo5::encode(&flow, &valid).unwrap()).unwrap();
        assert_eq!(flow.data(), f2.data());
        assert_eq!(valid.data(), v2.data());
    }
});
