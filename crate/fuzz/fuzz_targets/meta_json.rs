#![no_main]

use libfuzzer_sys::fuzz_target;
use sdpt::io::dataset::Meta;

fuzz_target!(|data: &[u8]| {
    let _ = Meta::from_json(data);
});
