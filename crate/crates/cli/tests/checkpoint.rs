use codyra_cli::checkpoint::{read_frame, FORMAT_VERSION, MAGIC};
use codyra_cli::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError};
use codyra_core::adapter::{attach_adapters, AdapterConfig};
use codyra_core::encoder::{DualEncoder, EncoderKind, ModelConfig};
use codyra_core::synth::{IMAGE_SEQ_LEN, IMAGE_VOCAB, TEXT_SEQ_LEN, TEXT_VOCAB};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> DualEncoder {
    DualEncoder::new(ModelConfig::default(), seed).unwrap()
}

fn with_adapters(seed: u64) -> DualEncoder {
    let mut m = model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    attach_adapters(&mut m, &AdapterConfig { r_init: 3, ..AdapterConfig::default() }, &mut rng).unwrap();
    for a in &mut m.adapters {
        for x in a.b_mut() {
            *x = rng.gen_range(-0.1..0.1);
        }
    }
    // One adapter fully pruned, one partially.
    m.adapters[0].w_mut().fill(0.0);
    m.adapters[0].prune(0.0);
    m.adapters[1].w_mut()[1] = 0.0;
    m.adapters[1].prune(0.0);
    m
}

#[test]
fn save_load_save_is_byte_identical() {
    for m in [model(1), with_adapters(2)] {
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }
}

#[test]
fn files_round_trip_and_report_io_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = with_adapters(5);
    save_checkpoint(&m, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), m);
    let missing = dir.path().join("missing.ckpt");
    match load_checkpoint(&missing) {
        Err(e @ CheckpointError::Io { .. }) => assert!(e.to_string().contains("missing.ckpt")),
        other => panic!("expected io error, got {other:?}"),
    }
}

#[test]
fn reloaded_model_encodes_bitwise_identically() {
    let m = model(7);
    let back = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..16 {
        let image: Vec<usize> = (0..IMAGE_SEQ_LEN).map(|_| rng.gen_range(0..IMAGE_VOCAB)).collect();
        let text: Vec<usize> = (0..TEXT_SEQ_LEN).map(|_| rng.gen_range(0..TEXT_VOCAB)).collect();
        assert_eq!(m.encode_image(&image).unwrap().data(), back.encode_image(&image).unwrap().data());
        assert_eq!(m.encode_text(&text).unwrap().data(), back.encode_text(&text).unwrap().data());
    }
}

#[test]
fn manifest_lists_every_parameter_once() {
    let m = model(0);
    let (manifest, payload) = {
        let bytes = encode_checkpoint(&m);
        let (man, p) = read_frame(&bytes).unwrap();
        (man, p.len())
    };
    assert_eq!(manifest.tensors.len(), m.named_parameters().len());
    let total: usize = m.named_parameters().iter().map(|(_, t)| t.numel() * 8).sum();
    assert_eq!(payload, total);
    let per_encoder = |k: EncoderKind| manifest.tensors.iter().filter(|t| t.name.starts_with(k.as_str())).count();
    assert_eq!(per_encoder(EncoderKind::Vision), 5 + 12 * 2);
}

#[test]
fn corrupt_payload_byte_fails_checksum() {
    let mut bytes = encode_checkpoint(&model(1));
    let n = bytes.len();
    bytes[n - 100] ^= 0x01;
    assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::Checksum { .. })));
}

#[test]
fn unknown_version_is_explicit() {
    let mut bytes = encode_checkpoint(&model(1));
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        decode_checkpoint(&bytes),
        Err(CheckpointError::Version { found }) if found == FORMAT_VERSION + 1
    ));
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = encode_checkpoint(&model(1));
    bytes[0] = b'X';
    assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::BadMagic)));
    assert_eq!(&encode_checkpoint(&model(1))[..8], &MAGIC);
}

#[test]
fn truncation_is_a_manifest_error() {
    let bytes = encode_checkpoint(&model(1));
    for cut in [0, 5, 12, 20, 100, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(decode_checkpoint(&bytes[..cut]), Err(CheckpointError::Manifest(_))),
            "cut at {cut}"
        );
    }
}

/// Rewrites the manifest JSON and refreshes the length prefix.
fn with_manifest(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let mut json: serde_json::Value = serde_json::from_slice(&bytes[20..20 + len]).unwrap();
    edit(&mut json);
    let new = serde_json::to_vec(&json).unwrap();
    let mut out = bytes[..12].to_vec();
    out.extend_from_slice(&(new.len() as u64).to_le_bytes());
    out.extend_from_slice(&new);
    out.extend_from_slice(&bytes[20 + len..]);
    out
}

#[test]
fn shape_and_layout_inconsistencies_are_manifest_errors() {
    let bytes = encode_checkpoint(&model(1));
    let cases: Vec<Box<dyn Fn(&mut serde_json::Value)>> = vec![
        // Swap two shapes of equal size but different layout.
        Box::new(|j| j["tensors"][2]["shape"] = serde_json::json!([1, 64])),
        Box::new(|j| j["tensors"][0]["offset"] = serde_json::json!(8)),
        Box::new(|j| {
            j["tensors"].as_array_mut().unwrap().pop();
        }),
        Box::new(|j| j["tensors"][1]["name"] = j["tensors"][0]["name"].clone()),
        Box::new(|j| j["model"]["vision"]["hidden_dim"] = serde_json::json!(32)),
        Box::new(|j| j["model"]["vision"]["num_heads"] = serde_json::json!(0)),
    ];
    for (i, edit) in cases.iter().enumerate() {
        let b = with_manifest(&bytes, edit);
        assert!(matches!(decode_checkpoint(&b), Err(CheckpointError::Manifest(_))), "case {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_truncations_and_flips_never_panic(cut in 0usize..200_000, flip in any::<(usize, u8)>()) {
        let bytes = encode_checkpoint(&with_adapters(3));
        let cut = cut.min(bytes.len());
        prop_assert!(decode_checkpoint(&bytes[..cut]).is_err() || cut == bytes.len());
        let mut flipped = bytes.clone();
        let i = flip.0 % flipped.len();
        flipped[i] ^= flip.1 | 1;
        let _ = decode_checkpoint(&flipped);
    }

    #[test]
    fn any_payload_flip_fails_the_checksum(pos in any::<usize>(), bit in 0u8..8) {
        let bytes = encode_checkpoint(&model(4));
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let start = 20 + len;
        let i = start + pos % (bytes.len() - 4 - start);
        let mut flipped = bytes.clone();
        flipped[i] ^= 1 << bit;
        let is_checksum_error = matches!(decode_checkpoint(&flipped), Err(CheckpointError::Checksum { .. }));
        prop_assert!(is_checksum_error);
    }
}
