#![allow(dead_code)]

use codyra_core::encoder::{DualEncoder, EncoderConfig, ModelConfig};
use codyra_core::synth::{generate_domain, DomainSpec, DomainTask, IMAGE_SEQ_LEN, IMAGE_VOCAB, TEXT_SEQ_LEN, TEXT_VOCAB};
use codyra_core::trainer::TrainConfig;

pub fn tiny_config() -> ModelConfig {
    let enc = |vocab, seq| EncoderConfig {
        num_layers: 1,
        hidden_dim: 16,
        mlp_dim: 32,
        num_heads: 2,
        vocab_size: vocab,
        max_seq_len: seq,
        embed_dim: 8,
    };
    ModelConfig {
        vision: enc(IMAGE_VOCAB, IMAGE_SEQ_LEN),
        text: enc(TEXT_VOCAB, TEXT_SEQ_LEN),
        temperature: 0.07,
    }
}

pub fn tiny_model(seed: u64) -> DualEncoder {
    DualEncoder::new(tiny_config(), seed).unwrap()
}

pub fn small_task(domain_id: u32, seed: u64) -> DomainTask {
    let spec = DomainSpec {
        train_per_class: 8,
        test_per_class: 6,
        ..DomainSpec::new(domain_id, 4, seed)
    };
    generate_domain(&spec).unwrap()
}

pub fn short_training(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations_per_task: iterations,
        batch_size: 8,
        ..TrainConfig::default()
    }
}
