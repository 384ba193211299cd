//! Weight checkpoint decoder must reject arbitrary bytes without panicking,
//! and anything it accepts must re-encode to the same bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = dihe::tensor::checkpoint::decode(data) {
        let reencoded = dihe::tensor::checkpoint::encode(&params);
        assert_eq!(data, reencoded);
    }
});
