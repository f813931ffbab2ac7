use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use codyra_core::adapter::{count_for_geometry, SiteFilter};
use codyra_core::analysis::{
    ablate_modules, amplification_report, placement_rank_sweep, rank_allocation, summarize_sweep,
    write_amplification_csv, write_sweep_csv, GroupTally,
};
use codyra_core::encoder::{DualEncoder, EncoderConfig, EncoderKind, ModelConfig, Site, SiteId};
use codyra_core::metrics::AccuracyMatrix;
use codyra_core::synth::{build_pretrain_corpus, Datasets};
use codyra_core::trainer::{derive_seed, pretrain, run_stream_with, train_task, RunRecord, SiteDelta, TaskStats};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::CliError;

type Result<T, E = CliError> = std::result::Result<T, E>;

const INIT_TAG: u64 = 1;
const CORPUS_TAG: u64 = 2;
const PRETRAIN_TAG: u64 = 3;
const STREAM_TAG: u64 = 4;
const ABLATE_TAG: u64 = 5;

#[derive(Debug, Parser)]
#[command(name = "codyra", version, about = "Continual learning with rank-selective adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON). Built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `global_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.global_seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// CLIP ViT-B/16: 12×768/3072 vision, 12×512/2048 text.
    #[value(name = "vit-b16")]
    VitB16,
    /// The default desk-scale model.
    Desk,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the dual encoder on the base domains.
    Pretrain(Common),
    /// Learn the continual stream; writes run.json, CSV reports and checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of pre-training.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Fixed-rank LoRA over the configured placement × rank × seed grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint to start from.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Train the first stream task, then evaluate with selected sites' updates removed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint to start from.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Sites to zero: `all`, `none`, `vision`, `text.fc`, `vision.0.q`; commas combine.
        /// Repeat for several evaluations. Defaults to a standard set.
        #[arg(long = "select")]
        select: Vec<String>,
    },
    /// Amplification factors and rank allocation from a finished run directory.
    Analyze {
        #[arg(long)]
        run_dir: PathBuf,
        /// Singular directions per matrix; defaults to each adapter's active rank.
        #[arg(long)]
        rank: Option<usize>,
        /// Where to write the reports; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transfer / Average / Last from a stored accuracy matrix.
    Metrics {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trainable adapter parameters for a geometry.
    Params {
        #[arg(long, value_enum, conflicts_with = "config")]
        preset: Option<Preset>,
        /// Take the geometry and site filter from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        rank: usize,
    },
}

pub(crate) fn execute(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(common) => cmd_pretrain(&common),
        Command::Run { common, from } => cmd_run(&common, from.as_deref()),
        Command::Sweep { common, from } => cmd_sweep(&common, from.as_deref()),
        Command::Ablate { common, from, select } => cmd_ablate(&common, from.as_deref(), &select),
        Command::Analyze { run_dir, rank, out } => cmd_analyze(&run_dir, rank, out.as_deref()),
        Command::Metrics { matrix, out } => cmd_metrics(&matrix, out.as_deref()),
        Command::Params { preset, config, rank } => cmd_params(preset, config.as_deref(), rank),
    }
}

/// CLIP ViT-B/16 geometry. Only the widths and depths matter for counting.
pub fn vit_b16() -> ModelConfig {
    ModelConfig {
        vision: EncoderConfig {
            num_layers: 12,
            hidden_dim: 768,
            mlp_dim: 3072,
            num_heads: 12,
            vocab_size: 1,
            max_seq_len: 197,
            embed_dim: 512,
        },
        text: EncoderConfig {
            num_layers: 12,
            hidden_dim: 512,
            mlp_dim: 2048,
            num_heads: 8,
            vocab_size: 49_408,
            max_seq_len: 77,
            embed_dim: 512,
        },
        temperature: 0.01,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.to_path_buf(), e)
}

fn output_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(dir.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn pretrained_model(cfg: &ExperimentConfig, data: &Datasets) -> Result<(DualEncoder, Vec<f64>)> {
    let seed = cfg.global_seed;
    let mut model = DualEncoder::new(cfg.model.clone(), derive_seed(seed, INIT_TAG))?;
    let corpus = build_pretrain_corpus(&data.base, derive_seed(seed, CORPUS_TAG))?;
    let losses = pretrain(&mut model, &corpus, &cfg.pretrain, derive_seed(seed, PRETRAIN_TAG))?;
    Ok((model, losses))
}

fn starting_model(cfg: &ExperimentConfig, data: &Datasets, from: Option<&Path>) -> Result<DualEncoder> {
    match from {
        Some(path) => {
            let model = load_checkpoint(path)?;
            if model.config != cfg.model {
                return Err(CliError::Config(format!(
                    "checkpoint {} was saved for a different model geometry",
                    path.display()
                )));
            }
            if !model.adapters.is_empty() {
                return Err(CliError::Config(format!(
                    "checkpoint {} carries unmerged adapters",
                    path.display()
                )));
            }
            Ok(model)
        }
        None => Ok(pretrained_model(cfg, data)?.0),
    }
}

fn cmd_pretrain(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let data = cfg.data.generate()?;
    let dir = output_dir(&cfg.output_dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    let (model, losses) = pretrained_model(&cfg, &data)?;
    save_checkpoint(&model, &dir.join("pretrained.ckpt"))?;
    write_json(&dir.join("pretrain.json"), &serde_json::json!({ "losses": losses }))?;
    println!(
        "{}",
        serde_json::json!({ "checkpoint": dir.join("pretrained.ckpt"), "final_loss": losses.last() })
    );
    Ok(())
}

/// The config as recorded in `run.json`: everything except where it was written.
fn recorded_config(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let mut value = serde_json::to_value(cfg)?;
    if let Some(map) = value.as_object_mut() {
        map.remove("output_dir");
    }
    Ok(value)
}

fn cmd_run(common: &Common, from: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let data = cfg.data.generate()?;
    let dir = output_dir(&cfg.output_dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    let mut model = starting_model(&cfg, &data, from)?;

    let mut snapshots = vec![model.clone()];
    let mut record = run_stream_with(
        &mut model,
        &data.stream,
        &data.reference,
        &cfg.train,
        derive_seed(cfg.global_seed, STREAM_TAG),
        |_, m, _| {
            snapshots.push(m.clone());
            Ok(())
        },
    )?;
    record.config = recorded_config(&cfg)?;

    let ckpt_dir = output_dir(&dir.join("checkpoints"))?;
    for (i, snap) in snapshots.iter().enumerate() {
        let name = format!("task_{i:03}.ckpt");
        save_checkpoint(snap, &ckpt_dir.join(&name))?;
        record.checkpoints.push(format!("checkpoints/{name}"));
    }
    write_json(&dir.join("run.json"), &record)?;
    record.accuracy.write_csv(create(&dir.join("accuracy.csv"))?)?;
    let metrics = record.accuracy.metrics()?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    write_analysis(
        &dir,
        &snapshots,
        &record.tasks,
        cfg.analysis.amplification_rank,
        cfg.analysis.amplification,
        cfg.analysis.allocation,
    )?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

fn write_groups(path: &Path, groups: &[(&str, Vec<GroupTally>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| CliError::Analysis(e.into());
    w.write_record(["grouping", "group", "count", "sum", "mean"]).map_err(csv_err)?;
    for (grouping, tallies) in groups {
        for t in tallies {
            w.write_record([
                grouping.to_string(),
                t.group.clone(),
                t.count.to_string(),
                t.sum.to_string(),
                format!("{:?}", t.mean),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// `snapshots[0]` is the starting model, `snapshots[i]` the model after task `i`.
fn write_analysis(
    dir: &Path,
    snapshots: &[DualEncoder],
    tasks: &[TaskStats],
    rank: Option<usize>,
    amplification: bool,
    allocation: bool,
) -> Result<()> {
    if allocation {
        let alloc = rank_allocation(tasks);
        alloc.write_csv(create(&dir.join("ranks.csv"))?)?;
        write_groups(
            &dir.join("rank_groups.csv"),
            &[
                ("site", alloc.by_site()),
                ("layer", alloc.by_layer()),
                ("task", alloc.by_task()),
            ],
        )?;
    }
    if amplification {
        let mut records = Vec::new();
        for (i, stats) in tasks.iter().enumerate() {
            records.extend(amplification_report(i + 1, &snapshots[i], &snapshots[i + 1], stats, rank)?);
        }
        write_amplification_csv(&records, create(&dir.join("amplification.csv"))?)?;
        write_json(&dir.join("amplification.json"), &records)?;
    }
    Ok(())
}

fn cmd_analyze(run_dir: &Path, rank: Option<usize>, out: Option<&Path>) -> Result<()> {
    let run_path = run_dir.join("run.json");
    let text = std::fs::read_to_string(&run_path).map_err(io_err(&run_path))?;
    let record: RunRecord = serde_json::from_str(&text)?;
    if record.checkpoints.len() != record.tasks.len() + 1 {
        return Err(CliError::Config(format!(
            "run.json lists {} checkpoints for {} tasks",
            record.checkpoints.len(),
            record.tasks.len()
        )));
    }
    let snapshots = record
        .checkpoints
        .iter()
        .map(|c| load_checkpoint(&run_dir.join(c)))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = output_dir(out.unwrap_or(run_dir))?;
    write_analysis(&dir, &snapshots, &record.tasks, rank, true, true)?;
    println!("{}", serde_json::json!({ "tasks": record.tasks.len(), "out": dir }));
    Ok(())
}

fn cmd_sweep(common: &Common, from: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let data = cfg.data.generate()?;
    let dir = output_dir(&cfg.output_dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    let model = starting_model(&cfg, &data, from)?;
    let records = placement_rank_sweep(&model, &data.stream[0], &data.reference, &cfg.analysis.sweep, &cfg.train)?;
    write_sweep_csv(&records, create(&dir.join("sweep.csv"))?)?;
    let summary = summarize_sweep(&records);
    write_json(&dir.join("sweep_summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// Expands one selector spec against the trained sites.
fn parse_selector(spec: &str, deltas: &[SiteDelta]) -> Result<Vec<SiteId>> {
    let mut out: Vec<SiteId> = Vec::new();
    for piece in spec.split(',').map(str::trim) {
        let parts: Vec<&str> = piece.split('.').collect();
        let chosen: Vec<SiteId> = match parts.as_slice() {
            ["none"] => Vec::new(),
            ["all"] => deltas.iter().map(|d| d.target).collect(),
            [enc] => {
                let enc: EncoderKind = enc.parse().map_err(CliError::Usage)?;
                deltas.iter().map(|d| d.target).filter(|t| t.encoder == enc).collect()
            }
            [enc, site] => {
                let enc: EncoderKind = enc.parse().map_err(CliError::Usage)?;
                let site: Site = site.parse().map_err(CliError::Usage)?;
                deltas
                    .iter()
                    .map(|d| d.target)
                    .filter(|t| t.encoder == enc && t.site == site)
                    .collect()
            }
            _ => vec![piece.parse::<SiteId>().map_err(CliError::Usage)?],
        };
        if chosen.is_empty() && piece != "none" {
            return Err(CliError::Usage(format!("selector `{piece}` matches no trained site")));
        }
        for id in chosen {
            if !out.contains(&id) {
                out.push(id);
            }
        }
    }
    Ok(out)
}

fn default_selectors(deltas: &[SiteDelta]) -> Vec<String> {
    let mut out = vec!["none".to_string()];
    for enc in EncoderKind::ALL {
        if deltas.iter().any(|d| d.target.encoder == enc) {
            out.push(enc.to_string());
        }
        for site in Site::ALL {
            if deltas.iter().any(|d| d.target.encoder == enc && d.target.site == site) {
                out.push(format!("{enc}.{site}"));
            }
        }
    }
    out.extend(deltas.iter().map(|d| d.target.to_string()));
    out.push("all".to_string());
    out
}

fn cmd_ablate(common: &Common, from: Option<&Path>, select: &[String]) -> Result<()> {
    let cfg = common.resolve()?;
    let data = cfg.data.generate()?;
    let dir = output_dir(&cfg.output_dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    let pretrained = starting_model(&cfg, &data, from)?;
    let probe = &data.stream[0];
    let mut adapted = pretrained.clone();
    let outcome = train_task(
        &mut adapted,
        probe,
        &cfg.train,
        derive_seed(cfg.global_seed, ABLATE_TAG),
        true,
    )?;
    let deltas = outcome.deltas.unwrap_or_default();
    let specs = if select.is_empty() {
        default_selectors(&deltas)
    } else {
        select.to_vec()
    };
    let path = dir.join("ablation.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let csv_err = |e: csv::Error| CliError::Analysis(e.into());
    w.write_record(["selector", "probe_acc", "ref_acc"]).map_err(csv_err)?;
    for spec in &specs {
        let sites = parse_selector(spec, &deltas)?;
        let (probe_acc, ref_acc) = ablate_modules(&pretrained, &deltas, &sites, probe, &data.reference)?;
        w.write_record([spec.clone(), format!("{probe_acc:?}"), format!("{ref_acc:?}")])
            .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))?;
    println!("{}", serde_json::json!({ "selectors": specs.len(), "out": path }));
    Ok(())
}

fn cmd_metrics(matrix: &Path, out: Option<&Path>) -> Result<()> {
    let file = File::open(matrix).map_err(io_err(matrix))?;
    let m = AccuracyMatrix::read_csv(file)?.metrics()?;
    if let Some(dir) = out {
        write_json(&output_dir(dir)?.join("metrics.json"), &m)?;
    }
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn cmd_params(preset: Option<Preset>, config: Option<&Path>, rank: usize) -> Result<()> {
    let (model, sites) = match (preset, config) {
        (Some(Preset::VitB16), _) => (vit_b16(), SiteFilter::all()),
        (_, Some(path)) => {
            let cfg = ExperimentConfig::load(path)?;
            (cfg.model, cfg.train.adapter.sites)
        }
        _ => (ModelConfig::default(), SiteFilter::all()),
    };
    let count = count_for_geometry(&model, &sites, rank);
    println!(
        "{}",
        serde_json::json!({
            "rank": rank,
            "adapters": count.adapters,
            "low_rank": count.low_rank,
            "importance": count.importance,
            "total": count.total,
        })
    );
    Ok(())
}
