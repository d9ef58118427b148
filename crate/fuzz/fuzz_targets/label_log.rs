#![no_main]

use balpm_core::label_service::parse_log;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = parse_log(data) {
        assert!(records.windows(2).all(|w| w[0].seq < w[1].seq));
    }
});
