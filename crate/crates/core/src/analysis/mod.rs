//! Measurement tools: amplification factors, rank-allocation tallies, the
//! placement × rank sweep and trained-module ablation.

mod svd;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use svd::{svd, svd_via_gram, symmetric_eigen, Svd};

use crate::adapter::{AdapterConfig, SiteFilter};
use crate::encoder::{DualEncoder, EncoderKind, Site, SiteId};
use crate::synth::DomainTask;
use crate::tensor::{Tensor, TensorError};
use crate::trainer::{self, evaluate, LabelSpace, SiteDelta, TaskStats, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("rank {r} outside 1..={max}")]
    Rank { r: usize, max: usize },
    #[error("site {0} has no trained delta")]
    UnknownSite(SiteId),
    #[error("model has no weight for site {0}")]
    MissingWeight(SiteId),
    #[error("sweep grid is empty")]
    EmptyGrid,
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

/// Which decomposition feeds [`amplification_factor_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SvdMethod {
    #[default]
    Jacobi,
    Gram,
}

/// `‖ΔW‖_F / ‖Uᵀ W₀ V‖_F` with `U`, `V` the top-`r` singular vectors of `ΔW`.
///
/// `None` when `ΔW = 0`. A vanishing denominator yields `f64::INFINITY`.
pub fn amplification_factor(w0: &Tensor, delta: &Tensor, r: usize) -> Result<Option<f64>> {
    amplification_factor_with(w0, delta, r, SvdMethod::Jacobi)
}

pub fn amplification_factor_with(w0: &Tensor, delta: &Tensor, r: usize, method: SvdMethod) -> Result<Option<f64>> {
    let (d, k) = delta.dims2("amplification_factor")?;
    if w0.shape() != delta.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "amplification_factor",
            left: w0.shape().to_vec(),
            right: delta.shape().to_vec(),
        }
        .into());
    }
    if delta.data().iter().all(|&x| x == 0.0) {
        return Ok(None);
    }
    let max = d.min(k);
    if r == 0 || r > max {
        return Err(AnalysisError::Rank { r, max });
    }
    let dec = match method {
        SvdMethod::Jacobi => svd(delta)?,
        SvdMethod::Gram => svd_via_gram(delta)?,
    };
    let (u, v) = dec.top(r);
    let projected = u.transpose()?.matmul(w0)?.matmul(&v)?;
    let denom = projected.frobenius_norm();
    if denom == 0.0 {
        log::warn!("amplification denominator vanished; reporting infinity");
        return Ok(Some(f64::INFINITY));
    }
    Ok(Some(delta.frobenius_norm() / denom))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmpRecord {
    /// 1-based task index.
    pub task: usize,
    pub target: SiteId,
    pub amp: Option<f64>,
    pub r: usize,
}

/// Amplification of every adapted matrix of one task, from the weights
/// before and after it was merged. `r` defaults to the post-prune rank.
pub fn amplification_report(
    task: usize,
    before: &DualEncoder,
    after: &DualEncoder,
    stats: &TaskStats,
    r_override: Option<usize>,
) -> Result<Vec<AmpRecord>> {
    stats
        .adapters
        .iter()
        .map(|a| {
            let w0 = before.base_weight(a.target).ok_or(AnalysisError::MissingWeight(a.target))?;
            let w1 = after.base_weight(a.target).ok_or(AnalysisError::MissingWeight(a.target))?;
            let delta = w1.sub(w0)?;
            let r = r_override.unwrap_or(a.active_ranks);
            let amp = if delta.data().iter().all(|&x| x == 0.0) {
                None
            } else {
                amplification_factor(w0, &delta, r)?
            };
            Ok(AmpRecord {
                task,
                target: a.target,
                amp,
                r,
            })
        })
        .collect()
}

/// CSV with an empty `amp` field for undefined entries and `inf` for the sentinel.
pub fn write_amplification_csv<W: Write>(records: &[AmpRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "encoder", "layer", "site", "amp", "r"])?;
    for rec in records {
        w.write_record([
            rec.task.to_string(),
            rec.target.encoder.to_string(),
            rec.target.layer.to_string(),
            rec.target.site.to_string(),
            rec.amp.map(|a| format!("{a:?}")).unwrap_or_default(),
            rec.r.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationEntry {
    pub task: usize,
    pub domain_id: u32,
    pub target: SiteId,
    pub r_init: usize,
    pub active_ranks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTally {
    pub group: String,
    pub count: usize,
    pub sum: usize,
    pub mean: f64,
}

/// Post-prune ranks of every adapter of every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAllocation {
    pub entries: Vec<AllocationEntry>,
}

pub fn rank_allocation(tasks: &[TaskStats]) -> RankAllocation {
    let entries = tasks
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            t.adapters.iter().map(move |a| AllocationEntry {
                task: i + 1,
                domain_id: t.domain_id,
                target: a.target,
                r_init: a.r_init,
                active_ranks: a.active_ranks,
            })
        })
        .collect();
    RankAllocation { entries }
}

impl RankAllocation {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.active_ranks).sum()
    }

    fn group_by(&self, key: impl Fn(&AllocationEntry) -> String) -> Vec<GroupTally> {
        let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for e in &self.entries {
            let slot = groups.entry(key(e)).or_default();
            slot.0 += 1;
            slot.1 += e.active_ranks;
        }
        groups
            .into_iter()
            .map(|(group, (count, sum))| GroupTally {
                group,
                count,
                sum,
                mean: sum as f64 / count as f64,
            })
            .collect()
    }

    /// Tallies keyed `encoder.site`, summed over layers and tasks.
    pub fn by_site(&self) -> Vec<GroupTally> {
        self.group_by(|e| format!("{}.{}", e.target.encoder, e.target.site))
    }

    /// Tallies keyed `encoder.layer`, summed over sites and tasks.
    pub fn by_layer(&self) -> Vec<GroupTally> {
        self.group_by(|e| format!("{}.{}", e.target.encoder, e.target.layer))
    }

    pub fn by_task(&self) -> Vec<GroupTally> {
        self.group_by(|e| format!("{:04}", e.task))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["task", "encoder", "layer", "site", "active_ranks"])?;
        for e in &self.entries {
            w.write_record([
                e.task.to_string(),
                e.target.encoder.to_string(),
                e.target.layer.to_string(),
                e.target.site.to_string(),
                e.active_ranks.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// A named subset of adapter sites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub name: String,
    pub sites: SiteFilter,
}

impl Placement {
    pub fn new(name: impl Into<String>, sites: SiteFilter) -> Self {
        Self {
            name: name.into(),
            sites,
        }
    }

    /// Whole model, each encoder alone, and attention vs MLP blocks.
    pub fn presets() -> Vec<Placement> {
        let both = |sites: &[Site]| SiteFilter {
            vision: sites.to_vec(),
            text: sites.to_vec(),
        };
        vec![
            Placement::new("all", SiteFilter::all()),
            Placement::new("vision", SiteFilter::only(EncoderKind::Vision, &Site::ALL)),
            Placement::new("text", SiteFilter::only(EncoderKind::Text, &Site::ALL)),
            Placement::new("attention", both(&Site::ATTENTION)),
            Placement::new("mlp", both(&Site::MLP)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub placements: Vec<Placement>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            placements: vec![Placement::new("all", SiteFilter::all())],
            ranks: vec![2, 4, 8, 16],
            seeds: (0..5).collect(),
        }
    }
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.placements.is_empty() || self.ranks.is_empty() || self.seeds.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub placement: String,
    pub rank: usize,
    pub seed: u64,
    pub new_task_accuracy: f64,
    pub reference_accuracy: f64,
}

/// Trains fixed-rank LoRA on `probe` from a copy of `pretrained` and scores
/// probe and reference. Rank 0 or an empty placement leaves the model as is.
pub fn sweep_cell(
    pretrained: &DualEncoder,
    probe: &DomainTask,
    reference: &DomainTask,
    placement: &Placement,
    rank: usize,
    seed: u64,
    train: &TrainConfig,
) -> Result<SweepRecord> {
    let mut model = pretrained.clone();
    if rank > 0 && !placement.sites.is_empty() {
        let cfg = TrainConfig {
            adapter: AdapterConfig {
                threshold_mode: train.adapter.threshold_mode,
                ..AdapterConfig::fixed_rank(rank, placement.sites.clone())
            },
            ..train.clone()
        };
        trainer::train_task(&mut model, probe, &cfg, seed, false)?;
    }
    Ok(SweepRecord {
        placement: placement.name.clone(),
        rank,
        seed,
        new_task_accuracy: evaluate(&model, probe, &LabelSpace::own(probe))?,
        reference_accuracy: evaluate(&model, reference, &LabelSpace::own(reference))?,
    })
}

/// Every placement × rank × seed cell, in that nesting order.
pub fn placement_rank_sweep(
    pretrained: &DualEncoder,
    probe: &DomainTask,
    reference: &DomainTask,
    grid: &SweepGrid,
    train: &TrainConfig,
) -> Result<Vec<SweepRecord>> {
    if grid.is_empty() {
        return Err(AnalysisError::EmptyGrid);
    }
    let mut out = Vec::with_capacity(grid.placements.len() * grid.ranks.len() * grid.seeds.len());
    for placement in &grid.placements {
        for &rank in &grid.ranks {
            for &seed in &grid.seeds {
                let rec = sweep_cell(pretrained, probe, reference, placement, rank, seed, train)?;
                log::info!(
                    "sweep {} r={} seed={}: new {:.3} ref {:.3}",
                    rec.placement,
                    rank,
                    seed,
                    rec.new_task_accuracy,
                    rec.reference_accuracy
                );
                out.push(rec);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMean {
    pub placement: String,
    pub rank: usize,
    pub seeds: usize,
    pub new_task_accuracy: f64,
    pub reference_accuracy: f64,
}

/// Seed means per (placement, rank), in first-seen order.
pub fn summarize_sweep(records: &[SweepRecord]) -> Vec<SweepMean> {
    let mut out: Vec<SweepMean> = Vec::new();
    for rec in records {
        let slot = match out
            .iter_mut()
            .position(|m| m.placement == rec.placement && m.rank == rec.rank)
        {
            Some(i) => &mut out[i],
            None => {
                out.push(SweepMean {
                    placement: rec.placement.clone(),
                    rank: rec.rank,
                    seeds: 0,
                    new_task_accuracy: 0.0,
                    reference_accuracy: 0.0,
                });
                out.last_mut().expect("just pushed")
            }
        };
        slot.seeds += 1;
        slot.new_task_accuracy += rec.new_task_accuracy;
        slot.reference_accuracy += rec.reference_accuracy;
    }
    for m in &mut out {
        m.new_task_accuracy /= m.seeds as f64;
        m.reference_accuracy /= m.seeds as f64;
    }
    out
}

pub fn write_sweep_csv<W: Write>(records: &[SweepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["placement", "rank", "seed", "new_acc", "ref_acc"])?;
    for rec in records {
        w.write_record([
            rec.placement.clone(),
            rec.rank.to_string(),
            rec.seed.to_string(),
            format!("{:?}", rec.new_task_accuracy),
            format!("{:?}", rec.reference_accuracy),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `deltas` minus the sites in `selector`. Every selected site must have a delta.
pub fn without_sites(deltas: &[SiteDelta], selector: &[SiteId]) -> Result<Vec<SiteDelta>> {
    if let Some(missing) = selector.iter().find(|s| !deltas.iter().any(|d| d.target == **s)) {
        return Err(AnalysisError::UnknownSite(*missing));
    }
    Ok(deltas
        .iter()
        .filter(|d| !selector.contains(&d.target))
        .cloned()
        .collect())
}

/// `pretrained` with every delta except the selected ones added in.
pub fn ablated_model(pretrained: &DualEncoder, deltas: &[SiteDelta], selector: &[SiteId]) -> Result<DualEncoder> {
    let kept = without_sites(deltas, selector)?;
    let mut model = pretrained.clone();
    for d in &kept {
        let w = model
            .base_weight_mut(d.target)
            .ok_or(AnalysisError::MissingWeight(d.target))?;
        *w = w.add(&d.delta)?;
    }
    Ok(model)
}

/// Probe and reference accuracy with the selected sites' deltas zeroed.
pub fn ablate_modules(
    pretrained: &DualEncoder,
    deltas: &[SiteDelta],
    selector: &[SiteId],
    probe: &DomainTask,
    reference: &DomainTask,
) -> Result<(f64, f64)> {
    let model = ablated_model(pretrained, deltas, selector)?;
    Ok((
        evaluate(&model, probe, &LabelSpace::own(probe))?,
        evaluate(&model, reference, &LabelSpace::own(reference))?,
    ))
}
