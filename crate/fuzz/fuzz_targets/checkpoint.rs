#![no_main]

use balpm_core::model::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ens) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ens);
        assert_eq!(decode_checkpoint(&bytes).expect("re-decode").members(), ens.members());
    }
});
