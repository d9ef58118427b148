#![no_main]

use balpm_core::entropy::{decode_knn_cache, encode_knn_cache};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((k, rows)) = decode_knn_cache(data) {
        assert_eq!(encode_knn_cache(k, &rows), data);
    }
});
