mod common;

use codyra_core::adapter::{AdapterConfig, SiteFilter};
use codyra_core::analysis::*;
use codyra_core::encoder::{DualEncoder, EncoderKind, Site, SiteId};
use codyra_core::tensor::Tensor;
use codyra_core::trainer::{evaluate, train_task, LabelSpace, SiteDelta};
use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_na(t: &Tensor) -> DMatrix<f64> {
    let (m, n) = t.dims2("to_na").unwrap();
    DMatrix::from_row_slice(m, n, t.data())
}

fn from_na(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Tensor::matrix(m.nrows(), m.ncols(), data).unwrap()
}

/// Amplification computed entirely with nalgebra.
fn nalgebra_amp(w0: &Tensor, delta: &Tensor, r: usize) -> f64 {
    let d = to_na(delta);
    let svd = d.clone().svd(true, true);
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let ur = DMatrix::from_fn(u.nrows(), r, |i, j| u[(i, idx[j])]);
    let vr = DMatrix::from_fn(vt.ncols(), r, |i, j| vt[(idx[j], i)]);
    d.norm() / (ur.transpose() * to_na(w0) * vr).norm()
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    m.qr().q()
}

#[test]
fn two_svd_routes_and_nalgebra_agree_on_twenty_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (m, n) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let w0 = Tensor::uniform(&[m, n], -1.0, 1.0, &mut rng);
        let delta = Tensor::uniform(&[m, n], -0.1, 0.1, &mut rng);
        let r = rng.gen_range(1..=m.min(n));
        let a = amplification_factor_with(&w0, &delta, r, SvdMethod::Jacobi).unwrap().unwrap();
        let b = amplification_factor_with(&w0, &delta, r, SvdMethod::Gram).unwrap().unwrap();
        let c = nalgebra_amp(&w0, &delta, r);
        assert!((a - b).abs() < 1e-9, "jacobi {a} gram {b}");
        assert!((a - c).abs() < 1e-9, "jacobi {a} nalgebra {c}");
    }
}

#[test]
fn full_rank_projection_keeps_the_whole_base_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w0 = Tensor::uniform(&[5, 5], -1.0, 1.0, &mut rng);
    let delta = Tensor::uniform(&[5, 5], -1.0, 1.0, &mut rng);
    let amp = amplification_factor(&w0, &delta, 5).unwrap().unwrap();
    assert!((amp - delta.frobenius_norm() / w0.frobenius_norm()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn amplification_is_homogeneous_in_delta(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let delta = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let base = amplification_factor(&w0, &delta, 2).unwrap().unwrap();
        let scaled = amplification_factor(&w0, &delta.scale(c), 2).unwrap().unwrap();
        prop_assert!((scaled - c * base).abs() <= 1e-9 * (c * base).max(1.0));
    }

    #[test]
    fn amplification_is_rotation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (rng.gen_range(2..=7), rng.gen_range(2..=7));
        let w0 = Tensor::uniform(&[m, n], -1.0, 1.0, &mut rng);
        let delta = Tensor::uniform(&[m, n], -1.0, 1.0, &mut rng);
        let r = rng.gen_range(1..=m.min(n));
        let (p, q) = (random_orthogonal(m, &mut rng), random_orthogonal(n, &mut rng));
        let rot = |t: &Tensor| from_na(&(&p * to_na(t) * &q));
        let a = amplification_factor(&w0, &delta, r).unwrap().unwrap();
        let b = amplification_factor(&rot(&w0), &rot(&delta), r).unwrap().unwrap();
        prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
    }
}

struct Trained {
    pretrained: DualEncoder,
    adapted: DualEncoder,
    deltas: Vec<SiteDelta>,
}

fn trained() -> Trained {
    let pretrained = tiny_model(4);
    let mut adapted = pretrained.clone();
    let task = small_task(5, 1);
    let cfg = short_training(12);
    let outcome = train_task(&mut adapted, &task, &cfg, 9, true).unwrap();
    Trained {
        pretrained,
        adapted,
        deltas: outcome.deltas.unwrap(),
    }
}

fn same_weights(a: &DualEncoder, b: &DualEncoder) -> bool {
    a.named_parameters()
        .iter()
        .zip(b.named_parameters())
        .all(|((_, x), (_, y))| x.data() == y.data())
}

fn site(encoder: EncoderKind, site: Site) -> SiteId {
    SiteId { encoder, layer: 0, site }
}

#[test]
fn ablating_nothing_or_everything_recovers_the_endpoints() {
    let t = trained();
    assert_eq!(t.deltas.len(), 12);
    let none = ablated_model(&t.pretrained, &t.deltas, &[]).unwrap();
    assert!(same_weights(&none, &t.adapted));
    let all: Vec<SiteId> = t.deltas.iter().map(|d| d.target).collect();
    let stripped = ablated_model(&t.pretrained, &t.deltas, &all).unwrap();
    assert!(same_weights(&stripped, &t.pretrained));

    let (probe, reference) = (small_task(5, 1), small_task(4, 2));
    let acc = |m: &DualEncoder| {
        (
            evaluate(m, &probe, &LabelSpace::own(&probe)).unwrap(),
            evaluate(m, &reference, &LabelSpace::own(&reference)).unwrap(),
        )
    };
    assert_eq!(ablate_modules(&t.pretrained, &t.deltas, &[], &probe, &reference).unwrap(), acc(&t.adapted));
    assert_eq!(ablate_modules(&t.pretrained, &t.deltas, &all, &probe, &reference).unwrap(), acc(&t.pretrained));
}

#[test]
fn reapplying_an_ablated_site_restores_the_adapted_model() {
    let t = trained();
    for d in &t.deltas {
        let mut m = ablated_model(&t.pretrained, &t.deltas, &[d.target]).unwrap();
        let w = m.base_weight_mut(d.target).unwrap();
        *w = w.add(&d.delta).unwrap();
        assert!(same_weights(&m, &t.adapted), "{}", d.target);
    }
}

#[test]
fn disjoint_ablations_compose() {
    let t = trained();
    let s1 = [site(EncoderKind::Vision, Site::Q), site(EncoderKind::Text, Site::Fc)];
    let s2 = [site(EncoderKind::Vision, Site::Proj)];
    let stepwise = without_sites(&without_sites(&t.deltas, &s1).unwrap(), &s2).unwrap();
    let union: Vec<SiteId> = s1.iter().chain(&s2).copied().collect();
    let a = ablated_model(&t.pretrained, &stepwise, &[]).unwrap();
    let b = ablated_model(&t.pretrained, &t.deltas, &union).unwrap();
    assert!(same_weights(&a, &b));
}

#[test]
fn unknown_site_is_rejected() {
    let t = trained();
    let bogus = SiteId {
        encoder: EncoderKind::Vision,
        layer: 7,
        site: Site::Q,
    };
    assert!(matches!(
        ablated_model(&t.pretrained, &t.deltas, &[bogus]),
        Err(AnalysisError::UnknownSite(s)) if s == bogus
    ));
}

#[test]
fn rank_zero_sweep_cell_is_the_pretrained_model() {
    let model = tiny_model(6);
    let (probe, reference) = (small_task(5, 3), small_task(4, 2));
    let all = Placement::new("all", SiteFilter::all());
    let rec = sweep_cell(&model, &probe, &reference, &all, 0, 1, &short_training(4)).unwrap();
    assert_eq!(rec.new_task_accuracy, evaluate(&model, &probe, &LabelSpace::own(&probe)).unwrap());
    assert_eq!(rec.reference_accuracy, evaluate(&model, &reference, &LabelSpace::own(&reference)).unwrap());
}

#[test]
fn sweep_is_deterministic_and_ordered() {
    let model = tiny_model(6);
    let (probe, reference) = (small_task(5, 3), small_task(4, 2));
    let grid = SweepGrid {
        placements: vec![
            Placement::new("vision", SiteFilter::only(EncoderKind::Vision, &Site::ALL)),
            Placement::new("mlp", SiteFilter { vision: Site::MLP.to_vec(), text: Site::MLP.to_vec() }),
        ],
        ranks: vec![1, 2],
        seeds: vec![0, 1],
    };
    let cfg = short_training(6);
    let a = placement_rank_sweep(&model, &probe, &reference, &grid, &cfg).unwrap();
    let b = placement_rank_sweep(&model, &probe, &reference, &grid, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
    assert_eq!((a[0].placement.as_str(), a[0].rank, a[0].seed), ("vision", 1, 0));
    assert_eq!((a[7].placement.as_str(), a[7].rank, a[7].seed), ("mlp", 2, 1));
    assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.new_task_accuracy)));
    let mut csv = Vec::new();
    write_sweep_csv(&a, &mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("placement,rank,seed,new_acc,ref_acc\n"));

    let empty = SweepGrid { ranks: vec![], ..grid };
    assert!(matches!(
        placement_rank_sweep(&model, &probe, &reference, &empty, &cfg),
        Err(AnalysisError::EmptyGrid)
    ));
}

#[test]
fn fixed_rank_run_allocates_r_init_everywhere() {
    let mut model = tiny_model(1);
    let cfg = codyra_core::trainer::TrainConfig {
        adapter: AdapterConfig::fixed_rank(3, SiteFilter::all()),
        ..short_training(6)
    };
    let out = train_task(&mut model, &small_task(5, 1), &cfg, 0, false).unwrap();
    let alloc = rank_allocation(&[out.stats]);
    assert!(alloc.entries.iter().all(|e| e.active_ranks == 3));
    assert_eq!(alloc.total(), 12 * 3);
}
