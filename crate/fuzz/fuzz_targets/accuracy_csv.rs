#![no_main]

use codyra_core::metrics::AccuracyMatrix;
use libfuzzer_sys::fuzz_target;

fn to_csv(m: &AccuracyMatrix) -> Vec<u8> {
    let mut out = Vec::new();
    m.write_csv(&mut out).expect("writing to memory");
    out
}

fuzz_target!(|data: &[u8]| {
    let Ok(matrix) = AccuracyMatrix::read_csv(data) else { return };
    let _ = matrix.metrics();
    let text = to_csv(&matrix);
    let again = AccuracyMatrix::read_csv(text.as_slice()).expect("written matrix parses");
    assert_eq!(to_csv(&again), text);
});
