#![no_main]

use bitrank::{ModelConfig, SearchSpace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = serde_json::from_slice::<ModelConfig>(data) {
        let again = serde_json::to_vec(&config).unwrap();
        assert_eq!(serde_json::from_slice::<ModelConfig>(&again).unwrap(), config);
        let _ = SearchSpace::default().validate(&config);
    }
});
