//! Replays the checked-in fuzz seeds through the fuzz targets' assertions.

use std::path::PathBuf;

use codyra_cli::{decode_checkpoint, encode_checkpoint, ExperimentConfig};
use codyra_core::metrics::AccuracyMatrix;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            (path.display().to_string(), std::fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn checkpoint_seeds_decode_and_round_trip() {
    for (name, bytes) in seeds("checkpoint") {
        let model = decode_checkpoint(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(encode_checkpoint(&model), bytes, "{name}");
    }
}

#[test]
fn config_seeds_parse_and_round_trip() {
    for (name, bytes) in seeds("config") {
        let text = String::from_utf8(bytes).unwrap();
        let cfg = ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg, "{name}");
    }
}

#[test]
fn accuracy_seeds_parse_and_round_trip() {
    let to_csv = |m: &AccuracyMatrix| {
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        out
    };
    for (name, bytes) in seeds("accuracy_csv") {
        let m = AccuracyMatrix::read_csv(bytes.as_slice()).unwrap_or_else(|e| panic!("{name}: {e}"));
        m.metrics().unwrap_or_else(|e| panic!("{name}: {e}"));
        let text = to_csv(&m);
        assert_eq!(to_csv(&AccuracyMatrix::read_csv(text.as_slice()).unwrap()), text, "{name}");
    }
}
