use codyra_core::adapter::*;
use codyra_core::encoder::{DualEncoder, EncoderKind, ModelConfig, Site, SiteId};
use codyra_core::synth::{IMAGE_SEQ_LEN, IMAGE_VOCAB, TEXT_SEQ_LEN, TEXT_VOCAB};
use codyra_core::tensor::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn target() -> SiteId {
    SiteId {
        encoder: EncoderKind::Text,
        layer: 1,
        site: Site::Fc,
    }
}

fn random_adapter(d: usize, k: usize, r: usize, rng: &mut ChaCha8Rng) -> RankSelectiveAdapter {
    let a = Tensor::uniform(&[r, k], -1.0, 1.0, rng);
    let b = Tensor::uniform(&[d, r], -1.0, 1.0, rng);
    let w = Tensor::uniform(&[r], -1.0, 1.0, rng);
    RankSelectiveAdapter::from_factors(target(), &a, &b, &w, r).unwrap()
}

/// `B · diag(w) · A` evaluated with nalgebra.
fn dense_oracle(ad: &RankSelectiveAdapter) -> DMatrix<f64> {
    let (d, k) = ad.dims();
    let r = ad.rank();
    let a = DMatrix::from_row_slice(r, k, ad.a());
    let b = DMatrix::from_row_slice(d, r, ad.b());
    let w = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(ad.w()));
    b * w * a
}

fn assert_matches_oracle(ad: &RankSelectiveAdapter, tol: f64) {
    let delta = ad.delta();
    let oracle = dense_oracle(ad);
    let (d, k) = ad.dims();
    for i in 0..d {
        for j in 0..k {
            let diff = (delta.data()[i * k + j] - oracle[(i, j)]).abs();
            assert!(diff < tol, "({i},{j}) differs by {diff}");
        }
    }
}

#[test]
fn delta_matches_dense_oracle_6x6_rank4() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        assert_matches_oracle(&random_adapter(6, 6, 4, &mut rng), 1e-12);
    }
}

proptest! {
    #[test]
    fn delta_matches_dense_oracle_on_any_shape(seed in any::<u64>(), d in 1usize..9, k in 1usize..9, r in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assert_matches_oracle(&random_adapter(d, k, r, &mut rng), 1e-12);
    }

    #[test]
    fn delta_is_linear_in_w(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ad = random_adapter(5, 4, 3, &mut rng);
        let mut scaled = ad.clone();
        for w in scaled.w_mut() {
            *w *= alpha;
        }
        let lhs = scaled.delta();
        let rhs = ad.delta().scale(alpha);
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn shrink_contracts_toward_zero(x in -1.0f64..1.0, kappa in 0.0f64..0.5) {
        let y = proximal_step(&[x], kappa, ThresholdMode::Shrink).unwrap()[0];
        prop_assert!(y.abs() <= x.abs());
        prop_assert!(y == 0.0 || y.signum() == x.signum());
        let identity = proximal_step(&[x], 0.0, ThresholdMode::Shrink).unwrap()[0];
        prop_assert_eq!(identity, x);
    }

    #[test]
    fn schedule_is_zero_then_non_decreasing_to_kappa_max(
        total in 1usize..300,
        rho in 0.0f64..0.99,
        kappa in 0.0f64..0.1,
    ) {
        let s = ThresholdSchedule::new(total, rho, kappa).unwrap();
        let td = s.dense_until();
        prop_assert_eq!(td, (rho * total as f64).floor() as usize);
        let ks: Vec<f64> = (0..total).map(|t| s.threshold_at(t).unwrap()).collect();
        prop_assert!(ks[..td].iter().all(|&k| k == 0.0));
        prop_assert!(ks.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((ks[total - 1] - kappa).abs() < 1e-15);
        prop_assert!(s.threshold_at(total).is_err());
    }

    #[test]
    fn pruning_exact_zeros_preserves_delta(seed in any::<u64>(), mask in any::<u8>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ad = random_adapter(6, 5, 6, &mut rng);
        for (i, w) in ad.w_mut().iter_mut().enumerate() {
            if mask & (1 << i) != 0 {
                *w = 0.0;
            }
        }
        let before = ad.delta();
        let kept = ad.prune(0.0);
        prop_assert_eq!(kept, 6 - (mask & 0x3f).count_ones() as usize);
        prop_assert!(ad.rank() <= ad.r_init());
        prop_assert!(ad.delta().max_abs_diff(&before) < 1e-12);
    }
}

/// Argmin of `κ|w| + ½(w − ŵ)²` over a grid of step 1e−5.
fn grid_argmin(w_hat: f64, kappa: f64) -> f64 {
    let step = 1e-5;
    let n = 12_000i64;
    let mut best = (f64::INFINITY, 0.0);
    for i in -n..=n {
        let w = i as f64 * step;
        let obj = kappa * w.abs() + 0.5 * (w - w_hat).powi(2);
        if obj < best.0 {
            best = (obj, w);
        }
    }
    best.1
}

#[test]
fn shrink_matches_brute_force_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let w_hat = rng.gen_range(-0.05..0.05);
        let kappa = rng.gen_range(0.0..0.01);
        let prox = proximal_step(&[w_hat], kappa, ThresholdMode::Shrink).unwrap()[0];
        let grid = grid_argmin(w_hat, kappa);
        assert!((prox - grid).abs() <= 1e-5, "ŵ={w_hat} κ={kappa}: {prox} vs {grid}");
    }
}

fn random_inputs(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let images = (0..n)
        .map(|_| (0..IMAGE_SEQ_LEN).map(|_| rng.gen_range(0..IMAGE_VOCAB)).collect())
        .collect();
    let texts = (0..n)
        .map(|_| (0..TEXT_SEQ_LEN).map(|_| rng.gen_range(0..TEXT_VOCAB)).collect())
        .collect();
    (images, texts)
}

fn outputs(model: &DualEncoder, images: &[Vec<usize>], texts: &[Vec<usize>]) -> (Tensor, Tensor) {
    let im: Vec<&[usize]> = images.iter().map(Vec::as_slice).collect();
    let tx: Vec<&[usize]> = texts.iter().map(Vec::as_slice).collect();
    (
        model.encode_batch(EncoderKind::Vision, &im).unwrap(),
        model.encode_batch(EncoderKind::Text, &tx).unwrap(),
    )
}

/// Attaches adapters on every default site with random non-trivial factors.
fn randomly_adapted(seed: u64) -> DualEncoder {
    let mut model = DualEncoder::new(ModelConfig::default(), 100 + seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    attach_adapters(&mut model, &AdapterConfig::default(), &mut rng).unwrap();
    for ad in &mut model.adapters {
        for b in ad.b_mut() {
            *b = rng.gen_range(-0.05..0.05);
        }
    }
    model
}

#[test]
fn adapted_and_merged_paths_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (images, texts) = random_inputs(32, &mut rng);
    for seed in 0..3 {
        let adapted = randomly_adapted(seed);
        assert_eq!(adapted.adapters.len(), 24);
        let mut merged = adapted.clone();
        merge_adapters(&mut merged).unwrap();
        assert!(merged.adapters.is_empty());
        let (ai, at) = outputs(&adapted, &images, &texts);
        let (mi, mt) = outputs(&merged, &images, &texts);
        assert!(ai.max_abs_diff(&mi) < 1e-9);
        assert!(at.max_abs_diff(&mt) < 1e-9);
        // Something actually changed.
        let plain = DualEncoder::new(ModelConfig::default(), 100 + seed).unwrap();
        assert!(outputs(&plain, &images, &texts).0.max_abs_diff(&mi) > 1e-6);
    }
}

#[test]
fn fresh_adapter_after_merge_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (images, texts) = random_inputs(8, &mut rng);
    let mut model = randomly_adapted(1);
    merge_adapters(&mut model).unwrap();
    let before = outputs(&model, &images, &texts);
    attach_adapters(&mut model, &AdapterConfig::default(), &mut rng).unwrap();
    let after = outputs(&model, &images, &texts);
    assert_eq!(before.0.data(), after.0.data());
    assert_eq!(before.1.data(), after.1.data());
}

#[test]
fn zero_importance_merge_is_exactly_the_pre_task_model() {
    let base = DualEncoder::new(ModelConfig::default(), 5).unwrap();
    let mut model = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    attach_adapters(&mut model, &AdapterConfig::default(), &mut rng).unwrap();
    for ad in &mut model.adapters {
        ad.b_mut().iter_mut().for_each(|b| *b = 0.3);
        ad.w_mut().fill(0.0);
        assert_eq!(ad.prune(0.0), 0);
    }
    merge_adapters(&mut model).unwrap();
    assert_eq!(model, base);
}

#[test]
fn zero_adapter_merge_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w0 = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let ad = RankSelectiveAdapter::init(target(), 4, 3, 2, &mut rng);
    assert_eq!(merge(&w0, &ad).unwrap(), w0);
    let empty = RankSelectiveAdapter::empty(target(), 4, 3, 2);
    assert_eq!(merge(&w0, &empty).unwrap(), w0);
    assert_eq!(count_parameters(&[]), 0);
}

#[test]
fn vit_b16_geometry_count() {
    let enc = |layers, d, dm, heads| codyra_core::encoder::EncoderConfig {
        num_layers: layers,
        hidden_dim: d,
        mlp_dim: dm,
        num_heads: heads,
        vocab_size: 1,
        max_seq_len: 1,
        embed_dim: 512,
    };
    let cfg = ModelConfig {
        vision: enc(12, 768, 3072, 12),
        text: enc(12, 512, 2048, 8),
        temperature: 0.01,
    };
    let c = count_for_geometry(&cfg, &SiteFilter::all(), 16);
    assert_eq!((c.low_rank, c.importance, c.total), (4_423_680, 2_304, 4_425_984));
}
