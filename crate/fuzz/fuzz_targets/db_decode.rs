//! Descriptor database decoder must reject arbitrary bytes without
//! panicking, and anything it accepts must re-encode to the same bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(db) = dihe::retrieval::decode_db(data) {
        let reencoded = dihe::retrieval::encode_db(&db);
        assert_eq!(data, reencoded);
    }
});
