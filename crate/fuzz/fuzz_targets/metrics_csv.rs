#![no_main]

use balpm_core::harness::{read_metrics, write_metrics};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_metrics(data) {
        let mut out = Vec::new();
        write_metrics(&rows, &mut out).unwrap();
        assert_eq!(read_metrics(&out[..]).expect("re-read").len(), rows.len());
    }
});
