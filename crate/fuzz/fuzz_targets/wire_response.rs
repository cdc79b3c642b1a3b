#![no_main]

use bitrank::evaluator::wire::Response;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(resp) = Response::parse_line(line) {
        let _ = resp.clone().into_performance();
        let _ = resp.clone().into_dist();
        if let Ok(meta) = resp.into_meta() {
            let _ = meta.into_meta();
        }
    }
});
