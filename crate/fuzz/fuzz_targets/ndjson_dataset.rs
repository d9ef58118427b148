#![no_main]

use balpm_core::feature_store::{read_ndjson, write_ndjson};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = read_ndjson("fuzz", data) {
        let mut out = Vec::new();
        write_ndjson(&ds, &mut out).unwrap();
        let again = read_ndjson("fuzz", &out[..]).expect("re-read of written dataset");
        assert_eq!(again.tuples(), ds.tuples());
    }
});
