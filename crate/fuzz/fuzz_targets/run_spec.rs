#![no_main]

use bitrank::pipeline::RunSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = RunSpec::from_json_str(text) {
        // whatever was accepted must serialize back to an accepted spec
        let again = serde_json::to_string(&spec).unwrap();
        RunSpec::from_json_str(&again).unwrap();
    }
});
