//! Rank-selective low-rank adapters.
//!
//! An adapter on a base matrix `W₀ ∈ ℝ^{d×k}` carries factors `B ∈ ℝ^{d×r}`,
//! `A ∈ ℝ^{r×k}` and per-rank importance weights `w ∈ ℝ^r`:
//!
//! ```text
//! ΔW = Σᵢ wᵢ · B[:, i] · A[i, :] = B · diag(w) · A
//! ```
//!
//! During a task `w` is pushed toward sparsity by a soft-threshold applied
//! after each optimizer step, with a threshold that stays at zero for a dense
//! warm-up and then ramps linearly to `κ_max`. At task end, ranks whose weight
//! is exactly zero are pruned and the remaining update is merged into `W₀`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{DualEncoder, EncoderKind, ModelConfig, Site, SiteId};
use crate::tensor::{kernels, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("site filter selects no weight matrices")]
    EmptySiteFilter,
    #[error("model already has {0} attached adapters; merge them first")]
    AlreadyAttached(usize),
    #[error("threshold must be non-negative, got {0}")]
    NegativeThreshold(f64),
    #[error("iteration {t} outside schedule of {total} iterations")]
    IterationOutOfRange { t: usize, total: usize },
    #[error("invalid adapter configuration: {0}")]
    Config(String),
    #[error("no base weight for adapter target {0}")]
    MissingTarget(SiteId),
}

pub type Result<T, E = AdapterError> = std::result::Result<T, E>;

/// How the soft-threshold is applied to importance weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `sign(x)·max(|x| − κ, 0)`, the proximal operator of `κ‖·‖₁`.
    #[default]
    Shrink,
    /// `𝟙(|x| > κ)·(x + sign(x)·κ)`: zeroes small weights, pushes survivors outward.
    PaperLiteral,
}

/// Soft-thresholds importance weights after the supervised optimizer step.
pub fn proximal_step(w_hat: &[f64], kappa: f64, mode: ThresholdMode) -> Result<Vec<f64>> {
    if !(kappa >= 0.0) {
        return Err(AdapterError::NegativeThreshold(kappa));
    }
    let out = w_hat
        .iter()
        .map(|&x| match mode {
            ThresholdMode::Shrink => x.signum() * (x.abs() - kappa).max(0.0),
            ThresholdMode::PaperLiteral => {
                if x.abs() > kappa {
                    x + x.signum() * kappa
                } else {
                    0.0
                }
            }
        })
        // normalizes -0.0 so exact-zero checks stay sign agnostic
        .map(|x| if x == 0.0 { 0.0 } else { x })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub total_iters: usize,
    pub dense_ratio: f64,
    pub kappa_max: f64,
}

impl ThresholdSchedule {
    pub fn new(total_iters: usize, dense_ratio: f64, kappa_max: f64) -> Result<Self> {
        if total_iters == 0 {
            return Err(AdapterError::Config("schedule needs at least one iteration".into()));
        }
        if !(0.0..1.0).contains(&dense_ratio) {
            return Err(AdapterError::Config(format!(
                "dense ratio must lie in [0, 1), got {dense_ratio}"
            )));
        }
        if !(kappa_max >= 0.0) {
            return Err(AdapterError::NegativeThreshold(kappa_max));
        }
        Ok(Self {
            total_iters,
            dense_ratio,
            kappa_max,
        })
    }

    /// First sparse iteration, `⌊ρT⌋`.
    pub fn dense_until(&self) -> usize {
        (self.dense_ratio * self.total_iters as f64).floor() as usize
    }

    pub fn is_dense(&self, t: usize) -> bool {
        t < self.dense_until()
    }

    /// `κ(t)`: zero through the dense phase, then linear up to `κ_max` at `T − 1`.
    pub fn threshold_at(&self, t: usize) -> Result<f64> {
        if t >= self.total_iters {
            return Err(AdapterError::IterationOutOfRange {
                t,
                total: self.total_iters,
            });
        }
        let start = self.dense_until();
        if t < start {
            return Ok(0.0);
        }
        let span = self.total_iters - 1 - start;
        if span == 0 {
            return Ok(self.kappa_max);
        }
        Ok(self.kappa_max * (t - start) as f64 / span as f64)
    }
}

/// Which (encoder, site) pairs receive adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteFilter {
    #[serde(default)]
    pub vision: Vec<Site>,
    #[serde(default)]
    pub text: Vec<Site>,
}

impl Default for SiteFilter {
    fn default() -> Self {
        Self::all()
    }
}

impl SiteFilter {
    pub fn all() -> Self {
        Self {
            vision: Site::ALL.to_vec(),
            text: Site::ALL.to_vec(),
        }
    }

    pub fn none() -> Self {
        Self {
            vision: Vec::new(),
            text: Vec::new(),
        }
    }

    pub fn only(encoder: EncoderKind, sites: &[Site]) -> Self {
        let mut f = Self::none();
        *f.sites_mut(encoder) = sites.to_vec();
        f
    }

    pub fn sites(&self, encoder: EncoderKind) -> &[Site] {
        match encoder {
            EncoderKind::Vision => &self.vision,
            EncoderKind::Text => &self.text,
        }
    }

    fn sites_mut(&mut self, encoder: EncoderKind) -> &mut Vec<Site> {
        match encoder {
            EncoderKind::Vision => &mut self.vision,
            EncoderKind::Text => &mut self.text,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.vision.is_empty() && self.text.is_empty()
    }

    pub fn contains(&self, encoder: EncoderKind, site: Site) -> bool {
        self.sites(encoder).contains(&site)
    }

    /// Selected targets in canonical order (encoder, layer, site).
    pub fn targets(&self, model: &ModelConfig) -> Vec<SiteId> {
        let mut out = Vec::new();
        for encoder in EncoderKind::ALL {
            for layer in 0..model.encoder(encoder).num_layers {
                for site in Site::ALL {
                    if self.contains(encoder, site) {
                        out.push(SiteId {
                            encoder,
                            layer,
                            site,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    #[serde(default = "default_rank")]
    pub r_init: usize,
    #[serde(default = "default_kappa_max")]
    pub kappa_max: f64,
    #[serde(default = "default_dense_ratio")]
    pub dense_ratio: f64,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
    #[serde(default)]
    pub sites: SiteFilter,
}

fn default_rank() -> usize {
    16
}

fn default_kappa_max() -> f64 {
    0.005
}

fn default_dense_ratio() -> f64 {
    0.5
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            r_init: default_rank(),
            kappa_max: default_kappa_max(),
            dense_ratio: default_dense_ratio(),
            threshold_mode: ThresholdMode::default(),
            sites: SiteFilter::default(),
        }
    }
}

impl AdapterConfig {
    /// Fixed-rank LoRA: importance weights are never thresholded.
    pub fn fixed_rank(r: usize, sites: SiteFilter) -> Self {
        Self {
            r_init: r,
            kappa_max: 0.0,
            sites,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_init == 0 {
            return Err(AdapterError::Config("r_init must be at least 1".into()));
        }
        if !(self.kappa_max >= 0.0) {
            return Err(AdapterError::NegativeThreshold(self.kappa_max));
        }
        if !(0.0..1.0).contains(&self.dense_ratio) {
            return Err(AdapterError::Config(format!(
                "dense ratio must lie in [0, 1), got {}",
                self.dense_ratio
            )));
        }
        if self.sites.is_empty() {
            return Err(AdapterError::EmptySiteFilter);
        }
        Ok(())
    }

    pub fn schedule(&self, total_iters: usize) -> Result<ThresholdSchedule> {
        ThresholdSchedule::new(total_iters, self.dense_ratio, self.kappa_max)
    }
}

/// `(A, B, w)` attached to one base matrix. Rank may shrink to zero by pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSelectiveAdapter {
    pub target: SiteId,
    rows: usize,
    cols: usize,
    r_init: usize,
    /// `rank × cols`, row-major.
    a: Vec<f64>,
    /// `rows × rank`, row-major.
    b: Vec<f64>,
    w: Vec<f64>,
}

impl RankSelectiveAdapter {
    /// `A ~ U(−1/√k, 1/√k)`, `B = 0`, `w ~ U(0, 1)`.
    pub fn init<R: Rng + ?Sized>(target: SiteId, rows: usize, cols: usize, rank: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let a = (0..rank * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        let w = (0..rank).map(|_| rng.gen_range(0.0..1.0)).collect();
        Self {
            target,
            rows,
            cols,
            r_init: rank,
            a,
            b: vec![0.0; rows * rank],
            w,
        }
    }

    /// Builds an adapter from explicit factors `A[r×k]`, `B[d×r]`, `w[r]`.
    pub fn from_factors(target: SiteId, a: &Tensor, b: &Tensor, w: &Tensor, r_init: usize) -> Result<Self> {
        let (r, k) = a.dims2("adapter A")?;
        let (d, rb) = b.dims2("adapter B")?;
        if rb != r || w.numel() != r {
            return Err(TensorError::ShapeMismatch {
                op: "adapter factors",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            }
            .into());
        }
        if r > r_init {
            return Err(AdapterError::Config(format!("rank {r} exceeds r_init {r_init}")));
        }
        Ok(Self {
            target,
            rows: d,
            cols: k,
            r_init,
            a: a.data().to_vec(),
            b: b.data().to_vec(),
            w: w.data().to_vec(),
        })
    }

    /// A rank-zero adapter with `ΔW = 0`.
    pub fn empty(target: SiteId, rows: usize, cols: usize, r_init: usize) -> Self {
        Self {
            target,
            rows,
            cols,
            r_init,
            a: Vec::new(),
            b: Vec::new(),
            w: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.w.len()
    }

    pub fn r_init(&self) -> usize {
        self.r_init
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn a_mut(&mut self) -> &mut [f64] {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut [f64] {
        &mut self.b
    }

    pub fn w_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    /// Factors as tensors, or `None` once every rank is pruned.
    pub fn factor_tensors(&self) -> Option<(Tensor, Tensor, Tensor)> {
        let r = self.rank();
        if r == 0 {
            return None;
        }
        let a = Tensor::matrix(r, self.cols, self.a.clone()).ok()?;
        let b = Tensor::matrix(self.rows, r, self.b.clone()).ok()?;
        let w = Tensor::vector(self.w.clone()).ok()?;
        Some((a, b, w))
    }

    /// `ΔW = B · diag(w) · A`.
    pub fn delta(&self) -> Tensor {
        let (d, k, r) = (self.rows, self.cols, self.rank());
        let mut out = vec![0.0; d * k];
        if r > 0 {
            let mut bw = self.b.clone();
            for row in bw.chunks_mut(r) {
                for (x, s) in row.iter_mut().zip(&self.w) {
                    *x *= s;
                }
            }
            kernels::matmul_acc(&bw, &self.a, d, r, k, &mut out);
        }
        Tensor::matrix(d, k, out).expect("adapter dims are positive")
    }

    /// Trainable entries: `r·(d + k)` factor entries plus `r` importance weights.
    pub fn parameter_count(&self) -> usize {
        self.rank() * (self.rows + self.cols) + self.rank()
    }

    /// Removes ranks with `|wᵢ| ≤ ε`; returns the number of ranks kept.
    pub fn prune(&mut self, eps: f64) -> usize {
        let r = self.rank();
        let keep: Vec<usize> = (0..r).filter(|&i| self.w[i].abs() > eps).collect();
        if keep.len() == r {
            return r;
        }
        let a = keep
            .iter()
            .flat_map(|&i| self.a[i * self.cols..(i + 1) * self.cols].iter().copied())
            .collect();
        let mut b = Vec::with_capacity(self.rows * keep.len());
        for row in self.b.chunks(r) {
            b.extend(keep.iter().map(|&i| row[i]));
        }
        let w = keep.iter().map(|&i| self.w[i]).collect();
        self.a = a;
        self.b = b;
        self.w = w;
        self.rank()
    }
}

/// `W₀ + ΔW`.
pub fn merge(base: &Tensor, adapter: &RankSelectiveAdapter) -> Result<Tensor> {
    let (d, k) = base.dims2("merge")?;
    if (d, k) != adapter.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "merge",
            left: base.shape().to_vec(),
            right: vec![adapter.rows, adapter.cols],
        }
        .into());
    }
    Ok(base.add(&adapter.delta())?)
}

/// Attaches one freshly initialized adapter per selected site.
pub fn attach_adapters<R: Rng + ?Sized>(model: &mut DualEncoder, cfg: &AdapterConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    if !model.adapters.is_empty() {
        return Err(AdapterError::AlreadyAttached(model.adapters.len()));
    }
    for target in cfg.sites.targets(&model.config) {
        let (d, k) = target.site.dims(model.config.encoder(target.encoder));
        model
            .adapters
            .push(RankSelectiveAdapter::init(target, d, k, cfg.r_init, rng));
    }
    Ok(())
}

/// Folds every attached adapter into its base weight and detaches it.
pub fn merge_adapters(model: &mut DualEncoder) -> Result<Vec<RankSelectiveAdapter>> {
    let adapters = std::mem::take(&mut model.adapters);
    for adapter in &adapters {
        let base = model
            .base_weight_mut(adapter.target)
            .ok_or(AdapterError::MissingTarget(adapter.target))?;
        *base = merge(base, adapter)?;
    }
    Ok(adapters)
}

pub fn count_parameters(adapters: &[RankSelectiveAdapter]) -> usize {
    adapters.iter().map(RankSelectiveAdapter::parameter_count).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub adapters: usize,
    pub low_rank: usize,
    pub importance: usize,
    pub total: usize,
}

/// Trainable-parameter count for a geometry without materializing weights.
pub fn count_for_geometry(model: &ModelConfig, sites: &SiteFilter, rank: usize) -> ParameterCount {
    let targets = sites.targets(model);
    let low_rank = targets
        .iter()
        .map(|t| {
            let (d, k) = t.site.dims(model.encoder(t.encoder));
            rank * (d + k)
        })
        .sum();
    let importance = targets.len() * rank;
    ParameterCount {
        adapters: targets.len(),
        low_rank,
        importance,
        total: low_rank + importance,
    }
}
