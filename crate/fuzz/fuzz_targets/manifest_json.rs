//! Dataset manifest parsing must never panic on arbitrary JSON-ish input.

#![no_main]

use dihe::synthdata::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = serde_json::from_str::<DatasetManifest>(text);
    }
});
