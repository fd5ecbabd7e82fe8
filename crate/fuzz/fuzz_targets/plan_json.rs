#![no_main]

use libfuzzer_sys::fuzz_target;
use sdpt::scheduler::InferencePlan;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = InferencePlan::from_json(text) {
        let json = plan.to_json().unwrap();
        assert_eq!(InferencePlan::from_json(&json).unwrap().to_json().unwrap(), json);
    }
});
