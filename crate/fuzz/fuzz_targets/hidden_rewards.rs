#![no_main]

use balpm_core::sim::HiddenRewards;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = HiddenRewards::read_csv(data) {
        let mut out = Vec::new();
        table.write_csv(&mut out).unwrap();
        assert_eq!(HiddenRewards::read_csv(&out[..]).expect("re-read").len(), table.len());
    }
});
