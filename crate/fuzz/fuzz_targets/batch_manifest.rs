#![no_main]

use balpm_core::acquisition::{AcquisitionBatch, Policy};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(batch) = AcquisitionBatch::read_manifest(Policy::Balpm, 1, data) {
        let mut out = Vec::new();
        batch.write_manifest(&mut out).unwrap();
        let again = AcquisitionBatch::read_manifest(Policy::Balpm, 1, &out[..]).expect("re-read");
        assert_eq!(again.len(), batch.len());
    }
});
