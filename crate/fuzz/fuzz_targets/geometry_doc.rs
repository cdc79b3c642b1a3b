#![no_main]

use bitrank::space::memory_footprint;
use bitrank::{ModelGeometry, SearchSpace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(geom) = ModelGeometry::from_json_str(text) {
        // a validated geometry prices every in-space config without panicking
        let space = SearchSpace::default();
        let _ = memory_footprint(&space.max_config(geom.len()), &geom);
        let _ = memory_footprint(&space.min_config(geom.len()), &geom);
    }
});
