//! Training config text parsing must never panic, and whatever parses into
//! key = value pairs must be applied without panicking too.

#![no_main]

use dihe::training::{parse_config_text, TrainConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(pairs) = parse_config_text(text) {
            let _ = TrainConfig::from_pairs(&pairs);
        }
    }
});
