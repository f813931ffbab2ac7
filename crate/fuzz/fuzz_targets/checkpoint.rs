#![no_main]

use codyra_cli::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(model) = decode_checkpoint(data) else { return };
    // canonical bytes must survive a second trip unchanged
    let bytes = encode_checkpoint(&model);
    let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
    assert_eq!(encode_checkpoint(&again), bytes);
});
