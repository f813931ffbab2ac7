//! Pre-training, the per-task adapter loop and stream evaluation.
//!
//! Each continual task runs: attach fresh adapters → dense phase (plain
//! AdamW) → sparse phase (AdamW then soft-threshold on `w`) → prune
//! zero-importance ranks → merge into the base weights. `train_task` sees only
//! the current task; nothing from earlier tasks is stored.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{self, proximal_step, AdapterConfig, AdapterError};
use crate::encoder::{
    model_loss, DualEncoder, EncoderKind, ModelError, SiteId, Trainable,
};
use crate::metrics::{AccuracyMatrix, REFERENCE_COLUMN};
use crate::optim::{AdamState, AdamW};
use crate::synth::{batch_indices, DomainTask, Example, Pair, SynthError};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("model already carries {0} unmerged adapters")]
    AdaptersAttached(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Empty(&'static str),
    #[error("training set has {examples} examples, fewer than one batch of {batch}")]
    NotEnoughData { examples: usize, batch: usize },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// SplitMix64 mix of a base seed with a tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Each domain is scored against its own classes.
    #[default]
    PerDomain,
    /// Every domain is scored against the union of all evaluated domains' classes.
    UnionLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 600,
            batch_size: 32,
            optimizer: AdamW {
                lr: 3e-3,
                ..AdamW::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations_per_task: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub eval_mode: EvalMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations_per_task: 200,
            batch_size: 32,
            optimizer: AdamW::default(),
            adapter: AdapterConfig::default(),
            eval_mode: EvalMode::PerDomain,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_task == 0 {
            return Err(TrainError::Config("iterations_per_task must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        self.optimizer.validate().map_err(TrainError::Config)?;
        self.adapter.validate()?;
        Ok(())
    }
}

/// Cycles through seeded epochs of `n` items.
struct BatchStream {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n < batch {
            return Err(TrainError::NotEnoughData { examples: n, batch });
        }
        Ok(Self {
            n,
            batch,
            seed,
            epoch: 0,
            pending: Vec::new().into_iter(),
        })
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        loop {
            if let Some(b) = self.pending.next() {
                return Ok(b);
            }
            let order = batch_indices(self.n, self.batch, derive_seed(self.seed, self.epoch))?;
            self.epoch += 1;
            self.pending = order.into_iter();
        }
    }
}

/// Contrastively trains every base parameter on the corpus.
pub fn pretrain(model: &mut DualEncoder, corpus: &[Pair], cfg: &PretrainConfig, seed: u64) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(TrainError::Empty("pre-training corpus is empty"));
    }
    if !model.adapters.is_empty() {
        return Err(TrainError::AdaptersAttached(model.adapters.len()));
    }
    cfg.optimizer.validate().map_err(TrainError::Config)?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 {
        return Ok(losses);
    }
    let mut stream = BatchStream::new(corpus.len(), cfg.batch_size, seed)?;
    let mut states: Vec<AdamState> = model
        .named_parameters()
        .iter()
        .map(|(_, t)| AdamState::new(t.numel()))
        .collect();

    for _ in 0..cfg.iterations {
        let idx = stream.next_batch()?;
        let images: Vec<&[usize]> = idx.iter().map(|&i| corpus[i].image.as_slice()).collect();
        let texts: Vec<&[usize]> = idx.iter().map(|&i| corpus[i].text.as_slice()).collect();

        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::Base)?;
        let loss = model_loss(&mut g, model, &bound, &images, &texts)?;
        g.backward(loss)?;
        losses.push(g.value(loss).item());

        let vars: Vec<_> = EncoderKind::ALL
            .iter()
            .flat_map(|&k| bound.encoder(k).named().into_iter().map(|(_, v)| *v))
            .collect();
        for ((var, (_, param)), state) in vars.iter().zip(model.named_parameters_mut()).zip(&mut states) {
            let grad = g.grad(*var).expect("base parameters are differentiable");
            let decay = param.shape().len() == 2;
            cfg.optimizer.step(param.data_mut(), grad, state, decay);
        }
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterStat {
    pub target: SiteId,
    pub r_init: usize,
    pub active_ranks: usize,
    /// Trainable entries before pruning.
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub domain_id: u32,
    pub adapters: Vec<AdapterStat>,
    pub trainable_parameters: usize,
    pub active_parameters: usize,
    pub final_loss: f64,
}

impl TaskStats {
    pub fn total_active_ranks(&self) -> usize {
        self.adapters.iter().map(|a| a.active_ranks).sum()
    }
}

/// A merged update kept aside for ablation and amplification analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDelta {
    pub target: SiteId,
    pub delta: Tensor,
    pub active_ranks: usize,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub stats: TaskStats,
    /// Present when requested via `hold_deltas`.
    pub deltas: Option<Vec<SiteDelta>>,
}

fn example_batch<'a>(task: &'a DomainTask, examples: &[&'a Example]) -> (Vec<&'a [usize]>, Vec<&'a [usize]>) {
    let images = examples.iter().map(|e| e.image.as_slice()).collect();
    let texts = examples
        .iter()
        .map(|e| task.class_text[e.label].as_slice())
        .collect();
    (images, texts)
}

/// Learns one task with fresh rank-selective adapters, then prunes and merges.
pub fn train_task(
    model: &mut DualEncoder,
    task: &DomainTask,
    cfg: &TrainConfig,
    seed: u64,
    hold_deltas: bool,
) -> Result<TaskOutcome> {
    if !model.adapters.is_empty() {
        return Err(TrainError::AdaptersAttached(model.adapters.len()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xADA9));
    adapter::attach_adapters(model, &cfg.adapter, &mut rng)?;
    let schedule = cfg.adapter.schedule(cfg.iterations_per_task)?;
    let trainable_parameters = adapter::count_parameters(&model.adapters);

    let mut states: Vec<[AdamState; 3]> = model
        .adapters
        .iter()
        .map(|a| {
            [
                AdamState::new(a.a().len()),
                AdamState::new(a.b().len()),
                AdamState::new(a.w().len()),
            ]
        })
        .collect();
    let mut stream = BatchStream::new(task.train.len(), cfg.batch_size, derive_seed(seed, 0xBA7C))?;
    let mut final_loss = f64::NAN;

    for t in 0..cfg.iterations_per_task {
        let idx = stream.next_batch()?;
        let examples: Vec<&Example> = idx.iter().map(|&i| &task.train[i]).collect();
        let (images, texts) = example_batch(task, &examples);

        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::Adapters)?;
        let loss = model_loss(&mut g, model, &bound, &images, &texts)?;
        g.backward(loss)?;
        final_loss = g.value(loss).item();

        let kappa = (!schedule.is_dense(t))
            .then(|| schedule.threshold_at(t))
            .transpose()?;
        for ((adapter, vars), state) in model.adapters.iter_mut().zip(&bound.adapters).zip(&mut states) {
            let Some(vars) = vars else { continue };
            let opt = &cfg.optimizer;
            opt.step(adapter.a_mut(), g.grad(vars.a).expect("A is trainable"), &mut state[0], true);
            opt.step(adapter.b_mut(), g.grad(vars.b).expect("B is trainable"), &mut state[1], true);
            opt.step(adapter.w_mut(), g.grad(vars.w).expect("w is trainable"), &mut state[2], false);
            if let Some(kappa) = kappa {
                let w = proximal_step(adapter.w(), kappa, cfg.adapter.threshold_mode)?;
                adapter.w_mut().copy_from_slice(&w);
            }
        }
    }

    let mut stats = Vec::with_capacity(model.adapters.len());
    for a in &mut model.adapters {
        let parameters = a.parameter_count();
        let active_ranks = a.prune(0.0);
        stats.push(AdapterStat {
            target: a.target,
            r_init: a.r_init(),
            active_ranks,
            parameters,
        });
    }
    let active_parameters = adapter::count_parameters(&model.adapters);
    let deltas = hold_deltas.then(|| {
        model
            .adapters
            .iter()
            .map(|a| SiteDelta {
                target: a.target,
                delta: a.delta(),
                active_ranks: a.rank(),
            })
            .collect()
    });
    adapter::merge_adapters(model)?;
    Ok(TaskOutcome {
        stats: TaskStats {
            domain_id: task.domain_id(),
            adapters: stats,
            trainable_parameters,
            active_parameters,
            final_loss,
        },
        deltas,
    })
}

/// Candidate class names and where one task's classes sit among them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpace {
    pub texts: Vec<Vec<usize>>,
    pub offset: usize,
}

impl LabelSpace {
    pub fn own(task: &DomainTask) -> Self {
        Self {
            texts: task.class_text.clone(),
            offset: 0,
        }
    }

    /// Union of all `tasks`' classes, positioned for `tasks[which]`.
    pub fn union(tasks: &[&DomainTask], which: usize) -> Self {
        let offset = tasks[..which].iter().map(|t| t.num_classes()).sum();
        Self {
            texts: tasks.iter().flat_map(|t| t.class_text.iter().cloned()).collect(),
            offset,
        }
    }
}

const EVAL_CHUNK: usize = 64;

/// Fraction of test examples whose nearest class name is the true class.
pub fn evaluate(model: &DualEncoder, task: &DomainTask, space: &LabelSpace) -> Result<f64> {
    if task.test.is_empty() {
        return Err(TrainError::Empty("task has no test examples"));
    }
    if space.offset + task.num_classes() > space.texts.len() {
        return Err(TrainError::Config("label space does not cover the task's classes".into()));
    }
    let texts: Vec<&[usize]> = space.texts.iter().map(Vec::as_slice).collect();
    let zt = model.encode_batch(EncoderKind::Text, &texts)?;
    let dim = zt.last_dim();
    let mut correct = 0usize;
    for chunk in task.test.chunks(EVAL_CHUNK) {
        let images: Vec<&[usize]> = chunk.iter().map(|e| e.image.as_slice()).collect();
        let zi = model.encode_batch(EncoderKind::Vision, &images)?;
        for (ex, z) in chunk.iter().zip(zi.data().chunks(dim)) {
            if argmax_similarity(z, &zt) == space.offset + ex.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / task.test.len() as f64)
}

/// Index of the text row with the highest cosine similarity (first on ties).
pub fn argmax_similarity(image: &[f64], text: &Tensor) -> usize {
    let dim = image.len();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, row) in text.data().chunks(dim).enumerate() {
        let s = crate::encoder::cosine(image, row);
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Scores one model state on every stream domain followed by the reference.
pub fn evaluate_all(
    model: &DualEncoder,
    stream: &[DomainTask],
    reference: &DomainTask,
    mode: EvalMode,
) -> Result<Vec<f64>> {
    let all: Vec<&DomainTask> = stream.iter().chain(std::iter::once(reference)).collect();
    all.iter()
        .enumerate()
        .map(|(i, task)| {
            let space = match mode {
                EvalMode::PerDomain => LabelSpace::own(task),
                EvalMode::UnionLabel => LabelSpace::union(&all, i),
            };
            evaluate(model, task, &space)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: serde_json::Value,
    pub accuracy: AccuracyMatrix,
    pub tasks: Vec<TaskStats>,
    /// Seconds per task; excluded from determinism comparisons.
    pub wall_clock: Vec<f64>,
    pub checkpoints: Vec<String>,
}

impl RunRecord {
    /// Copy with timing fields cleared.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock: Vec::new(),
            ..self.clone()
        }
    }
}

pub fn stream_columns(stream: &[DomainTask]) -> Vec<String> {
    stream
        .iter()
        .map(|t| format!("domain_{}", t.domain_id()))
        .chain(std::iter::once(REFERENCE_COLUMN.to_string()))
        .collect()
}

/// Learns `stream` in order, filling the accuracy matrix after each task.
/// `after_task(i, model, stats)` runs once the `i`-th task (1-based) is merged.
pub fn run_stream_with<F>(
    model: &mut DualEncoder,
    stream: &[DomainTask],
    reference: &DomainTask,
    cfg: &TrainConfig,
    seed: u64,
    mut after_task: F,
) -> Result<RunRecord>
where
    F: FnMut(usize, &DualEncoder, &TaskStats) -> Result<()>,
{
    if stream.is_empty() {
        return Err(TrainError::Empty("stream has no tasks"));
    }
    cfg.validate()?;
    let mut accuracy = AccuracyMatrix::new(stream_columns(stream));
    accuracy.push_row(0, evaluate_all(model, stream, reference, cfg.eval_mode)?);
    let mut tasks = Vec::with_capacity(stream.len());
    let mut wall_clock = Vec::with_capacity(stream.len());
    for (i, task) in stream.iter().enumerate() {
        let started = Instant::now();
        let outcome = train_task(model, task, cfg, derive_seed(seed, 1 + i as u64), false)?;
        wall_clock.push(started.elapsed().as_secs_f64());
        log::info!(
            "task {} (domain {}): loss {:.4}, active ranks {}",
            i + 1,
            task.domain_id(),
            outcome.stats.final_loss,
            outcome.stats.total_active_ranks()
        );
        accuracy.push_row(i + 1, evaluate_all(model, stream, reference, cfg.eval_mode)?);
        after_task(i + 1, model, &outcome.stats)?;
        tasks.push(outcome.stats);
    }
    Ok(RunRecord {
        config: serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
        accuracy,
        tasks,
        wall_clock,
        checkpoints: Vec::new(),
    })
}

pub fn run_stream(
    model: &mut DualEncoder,
    stream: &[DomainTask],
    reference: &DomainTask,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunRecord> {
    run_stream_with(model, stream, reference, cfg, seed, |_, _, _| Ok(()))
}
