#![no_main]

use bitrank::evaluator::wire::{handle_request, Request};
use bitrank::evaluator::{SyntheticModel, SyntheticParams};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(req) = Request::parse_line(line) {
        // any parsed request gets a response, never a panic
        let model = SyntheticModel::new(SyntheticParams {
            layers: 4,
            ..Default::default()
        })
        .unwrap();
        let resp = handle_request(&model, &req);
        assert_eq!(resp.id, req.id);
    }
});
