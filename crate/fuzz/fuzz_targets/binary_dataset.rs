#![no_main]

use balpm_core::feature_store::{decode_binary, encode_binary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = decode_binary("fuzz", data) {
        let again = decode_binary("fuzz", &encode_binary(&ds)).expect("re-decode of encoded dataset");
        assert_eq!(again.tuples(), ds.tuples());
    }
});
