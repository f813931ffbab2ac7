//! Deterministic synthetic domains standing in for image/label datasets.
//!
//! Every class of every domain has a real-valued prototype of length
//! [`IMAGE_SEQ_LEN`]. Prototypes mix a *shared concept* pattern, drawn from a
//! world seed and common to all domains, with a domain-specific pattern:
//!
//! ```text
//! proto(k) = scale · (s · concept((k + shift) mod C) + √(1 − s²) · specific(k))
//! ```
//!
//! Class names are `[domain marker, class marker, tens digit, units digit]`,
//! so digit tokens are shared across domains while whole class sequences are
//! not. A model that learns digit↔concept on some domains transfers zero-shot
//! to any unshifted domain; a nonzero `concept_shift` makes a domain disagree
//! with that mapping and forces adaptation.
//!
//! Images are prototype + Gaussian noise, quantized per position into
//! [`IMAGE_VOCAB`] bins over `[-QUANT_RANGE, QUANT_RANGE]`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IMAGE_SEQ_LEN: usize = 8;
pub const IMAGE_VOCAB: usize = 16;
pub const QUANT_RANGE: f64 = 2.0;

pub const TEXT_SEQ_LEN: usize = 4;
pub const CLASS_MARKER: usize = 0;
pub const DIGIT_BASE: usize = 1;
pub const DOMAIN_BASE: usize = 11;
pub const TEXT_VOCAB: usize = 32;
pub const MAX_DOMAINS: u32 = (TEXT_VOCAB - DOMAIN_BASE) as u32;
pub const MAX_CLASSES: usize = 100;

const TRAIN_STREAM: u64 = 1 << 40;
const TEST_STREAM: u64 = 2 << 40;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("domain needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("domain has {0} classes; at most {MAX_CLASSES} fit in two digits")]
    TooManyClasses(usize),
    #[error("domain id {0} exceeds the text vocabulary (max {MAX_DOMAINS})")]
    DomainIdOutOfRange(u32),
    #[error("invalid domain spec: {0}")]
    Spec(String),
    #[error("pre-training corpus needs at least 2 base domains, got {0}")]
    TooFewBaseDomains(usize),
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default = "one")]
    pub prototype_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
    /// Seed of the concept patterns shared by all domains.
    #[serde(default = "default_world_seed")]
    pub world_seed: u64,
    /// Weight `s ∈ [0, 1]` of the shared concept in each prototype.
    #[serde(default = "one")]
    pub shared_weight: f64,
    /// Class `k` shows concept `(k + shift) mod C`.
    #[serde(default)]
    pub concept_shift: usize,
}

fn one() -> f64 {
    1.0
}

pub const DEFAULT_WORLD_SEED: u64 = 0x00C0_FFEE;

fn default_world_seed() -> u64 {
    DEFAULT_WORLD_SEED
}

impl DomainSpec {
    pub fn new(domain_id: u32, num_classes: usize, seed: u64) -> Self {
        Self {
            domain_id,
            num_classes,
            train_per_class: 20,
            test_per_class: 10,
            prototype_scale: 1.0,
            noise_scale: 0.3,
            seed,
            world_seed: DEFAULT_WORLD_SEED,
            shared_weight: 0.8,
            concept_shift: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(SynthError::TooFewClasses(self.num_classes));
        }
        if self.num_classes > MAX_CLASSES {
            return Err(SynthError::TooManyClasses(self.num_classes));
        }
        if self.domain_id >= MAX_DOMAINS {
            return Err(SynthError::DomainIdOutOfRange(self.domain_id));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(SynthError::Spec("samples per class must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_weight) {
            return Err(SynthError::Spec(format!(
                "shared_weight must lie in [0, 1], got {}",
                self.shared_weight
            )));
        }
        if !(self.noise_scale >= 0.0) || !self.prototype_scale.is_finite() {
            return Err(SynthError::Spec("noise and prototype scales must be finite, noise >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub image: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainTask {
    pub spec: DomainSpec,
    pub class_text: Vec<Vec<usize>>,
    pub prototypes: Vec<Vec<f64>>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Token sequence naming class `class` of domain `domain_id`.
pub fn class_tokens(domain_id: u32, class: usize) -> Vec<usize> {
    vec![
        DOMAIN_BASE + domain_id as usize,
        CLASS_MARKER,
        DIGIT_BASE + class / 10,
        DIGIT_BASE + class % 10,
    ]
}

pub fn quantize(x: f64) -> usize {
    let unit = (x + QUANT_RANGE) / (2.0 * QUANT_RANGE);
    ((unit * IMAGE_VOCAB as f64).floor().max(0.0) as usize).min(IMAGE_VOCAB - 1)
}

/// Center of a quantization bin.
pub fn dequantize(token: usize) -> f64 {
    let width = 2.0 * QUANT_RANGE / IMAGE_VOCAB as f64;
    -QUANT_RANGE + (token as f64 + 0.5) * width
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn prototypes(spec: &DomainSpec) -> Vec<Vec<f64>> {
    let c = spec.num_classes;
    let s = spec.shared_weight;
    let own = (1.0 - s * s).max(0.0).sqrt();
    (0..c)
        .map(|k| {
            let concept_id = ((k + spec.concept_shift) % c) as u64;
            let concept = gaussian_vector(&mut stream_rng(spec.world_seed, concept_id), IMAGE_SEQ_LEN);
            let specific = gaussian_vector(&mut stream_rng(spec.seed, k as u64), IMAGE_SEQ_LEN);
            concept
                .iter()
                .zip(&specific)
                .map(|(a, b)| spec.prototype_scale * (s * a + own * b))
                .collect()
        })
        .collect()
}

fn sample_examples(protos: &[Vec<f64>], per_class: usize, noise: f64, mut rng: ChaCha8Rng) -> Vec<Example> {
    let mut out = Vec::with_capacity(protos.len() * per_class);
    for (label, proto) in protos.iter().enumerate() {
        for _ in 0..per_class {
            let image = proto
                .iter()
                .map(|&p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    quantize(p + noise * z)
                })
                .collect();
            out.push(Example { image, label });
        }
    }
    out
}

pub fn generate_domain(spec: &DomainSpec) -> Result<DomainTask> {
    spec.validate()?;
    let protos = prototypes(spec);
    let train = sample_examples(
        &protos,
        spec.train_per_class,
        spec.noise_scale,
        stream_rng(spec.seed, TRAIN_STREAM),
    );
    let test = sample_examples(
        &protos,
        spec.test_per_class,
        spec.noise_scale,
        stream_rng(spec.seed, TEST_STREAM),
    );
    let class_text = (0..spec.num_classes)
        .map(|k| class_tokens(spec.domain_id, k))
        .collect();
    Ok(DomainTask {
        spec: spec.clone(),
        class_text,
        prototypes: protos,
        train,
        test,
    })
}

impl DomainTask {
    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn domain_id(&self) -> u32 {
        self.spec.domain_id
    }

    /// Shuffled fixed-size batches of training examples; the last partial
    /// batch is dropped.
    pub fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<impl Iterator<Item = Vec<&Example>>> {
        let order = batch_indices(self.train.len(), batch_size, epoch_seed)?;
        Ok(order
            .into_iter()
            .map(move |idx| idx.into_iter().map(|i| &self.train[i]).collect()))
    }
}

/// Seeded permutation of `0..n` cut into full batches.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(SynthError::BatchTooSmall(batch_size));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// One (image, caption) pair of the pre-training corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub image: Vec<usize>,
    pub text: Vec<usize>,
    pub domain_id: u32,
    pub label: usize,
}

/// Interleaves every base domain's training set and shuffles it.
pub fn build_pretrain_corpus(base: &[DomainTask], mix_seed: u64) -> Result<Vec<Pair>> {
    if base.len() < 2 {
        return Err(SynthError::TooFewBaseDomains(base.len()));
    }
    let mut pairs: Vec<Pair> = base
        .iter()
        .flat_map(|task| {
            task.train.iter().map(move |ex| Pair {
                image: ex.image.clone(),
                text: task.class_text[ex.label].clone(),
                domain_id: task.domain_id(),
                label: ex.label,
            })
        })
        .collect();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed));
    Ok(pairs)
}

/// Base, held-out reference and continual domains of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub base: Vec<DomainSpec>,
    pub reference: DomainSpec,
    pub stream: Vec<DomainSpec>,
}

impl Default for DataConfig {
    /// Four pre-training domains, one held-out reference domain and five
    /// continual domains, 10 classes each. Continual domain `i` shifts the
    /// concept mapping by `i`.
    fn default() -> Self {
        let base = (0..4).map(|i| DomainSpec::new(i, 10, 1000 + u64::from(i))).collect();
        let reference = DomainSpec::new(4, 10, 1004);
        let stream = (0..5)
            .map(|i| DomainSpec {
                concept_shift: i as usize + 1,
                ..DomainSpec::new(5 + i, 10, 1005 + u64::from(i))
            })
            .collect();
        Self {
            base,
            reference,
            stream,
        }
    }
}

/// Generated tasks of a [`DataConfig`].
#[derive(Debug, Clone)]
pub struct Datasets {
    pub base: Vec<DomainTask>,
    pub reference: DomainTask,
    pub stream: Vec<DomainTask>,
}

impl DataConfig {
    pub fn generate(&self) -> Result<Datasets> {
        Ok(Datasets {
            base: self.base.iter().map(generate_domain).collect::<Result<_>>()?,
            reference: generate_domain(&self.reference)?,
            stream: self.stream.iter().map(generate_domain).collect::<Result<_>>()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn generation_is_deterministic() {
        let spec = DomainSpec::new(3, 5, 42);
        assert_eq!(generate_domain(&spec).unwrap(), generate_domain(&spec).unwrap());
    }

    #[test]
    fn zero_noise_collapses_each_class() {
        let spec = DomainSpec {
            noise_scale: 0.0,
            ..DomainSpec::new(1, 4, 9)
        };
        let task = generate_domain(&spec).unwrap();
        for class in 0..4 {
            let seqs: HashSet<_> = task
                .train
                .iter()
                .chain(&task.test)
                .filter(|e| e.label == class)
                .map(|e| e.image.clone())
                .collect();
            assert_eq!(seqs.len(), 1);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(
            generate_domain(&DomainSpec::new(0, 1, 0)).unwrap_err(),
            SynthError::TooFewClasses(1)
        );
        assert_eq!(
            generate_domain(&DomainSpec::new(MAX_DOMAINS, 3, 0)).unwrap_err(),
            SynthError::DomainIdOutOfRange(MAX_DOMAINS)
        );
        assert_eq!(
            generate_domain(&DomainSpec::new(0, 101, 0)).unwrap_err(),
            SynthError::TooManyClasses(101)
        );
    }

    #[test]
    fn labels_and_tokens_in_range() {
        let task = generate_domain(&DomainSpec::new(2, 7, 3)).unwrap();
        assert!(task.train.iter().chain(&task.test).all(|e| e.label < 7));
        assert!(task
            .train
            .iter()
            .all(|e| e.image.len() == IMAGE_SEQ_LEN && e.image.iter().all(|&t| t < IMAGE_VOCAB)));
        assert!(task
            .class_text
            .iter()
            .all(|t| t.len() == TEXT_SEQ_LEN && t.iter().all(|&x| x < TEXT_VOCAB)));
    }

    #[test]
    fn class_names_disjoint_across_domains() {
        let a: HashSet<_> = (0..10).map(|k| class_tokens(0, k)).collect();
        let b: HashSet<_> = (0..10).map(|k| class_tokens(1, k)).collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn corpus_counts_and_order() {
        let spec = |id| DomainSpec {
            train_per_class: 5,
            ..DomainSpec::new(id, 2, u64::from(id))
        };
        let tasks = vec![generate_domain(&spec(0)).unwrap(), generate_domain(&spec(1)).unwrap()];
        let corpus = build_pretrain_corpus(&tasks, 3).unwrap();
        assert_eq!(corpus.len(), 20);
        assert_eq!(corpus, build_pretrain_corpus(&tasks, 3).unwrap());

        let mut hist = std::collections::BTreeMap::new();
        for p in &corpus {
            *hist.entry((p.domain_id, p.label)).or_insert(0) += 1;
        }
        assert!(hist.values().all(|&n| n == 5));
        assert_eq!(hist.len(), 4);

        assert_eq!(
            build_pretrain_corpus(&tasks[..1], 3).unwrap_err(),
            SynthError::TooFewBaseDomains(1)
        );
    }

    #[test]
    fn batches_drop_partial_and_are_seeded() {
        let idx = batch_indices(10, 4, 7).unwrap();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx, batch_indices(10, 4, 7).unwrap());
        let flat: Vec<_> = idx.concat();
        let unique: HashSet<_> = flat.iter().collect();
        assert_eq!(unique.len(), flat.len());
        assert!(flat.iter().all(|&i| i < 10));
        assert_eq!(batch_indices(10, 1, 0).unwrap_err(), SynthError::BatchTooSmall(1));
    }

    #[test]
    fn quantization_round_trip_within_half_bin() {
        for t in 0..IMAGE_VOCAB {
            assert_eq!(quantize(dequantize(t)), t);
        }
        assert_eq!(quantize(-100.0), 0);
        assert_eq!(quantize(100.0), IMAGE_VOCAB - 1);
    }
}
