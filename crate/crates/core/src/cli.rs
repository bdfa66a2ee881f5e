//! `prefmoe` command line: gen-data, train, eval, relabel, ablate, report.
//!
//! `--config FILE` names a TOML file whose keys (flag names, with `_` or
//! `-`) override the flags of the invoked subcommand: top-level keys first,
//! then those under a `[subcommand]` table. Relative output paths are resolved
//! under `PREFMOE_OUT` when it is set.
//!
//! Exit status: 0 success, 2 usage error, 3 data error, 4 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use numcore::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    self, generate, regenerate, DatasetManifest, GenConfig, RosterSpec, SubsampleSpec, COMFORT,
    GOAL,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, TIE_TOLERANCE};
use crate::experiment::{
    run_ablation, Architecture, Condition, Experiment, ExperimentSpec, MetricsLine, MetricsRow,
    Variant,
};
use crate::inference::{relabel_with_routing, BufferFile, RelabelConfig, TransitionBuffer};
use crate::model::{AnyModel, Checkpoint, ModelSpec, RewardModel};
use crate::report::{write_report, MetricsTable};
use crate::trainer::{train, TrainConfig};

pub const OUT_ENV: &str = "PREFMOE_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "prefmoe",
    version,
    about = "Mixture-of-experts reward learning from pairwise preferences"
)]
pub struct Cli {
    /// TOML file overriding the subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic preference dataset (and optionally a transition buffer).
    GenData(GenDataArgs),
    /// Train a reward model; writes a checkpoint and a per-epoch report.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset's validation split.
    Eval(EvalArgs),
    /// Assign sliding-window rewards to every transition of a buffer.
    Relabel(RelabelArgs),
    /// Run an ablation grid over seeds.
    Ablate(AblateArgs),
    /// Merge metrics files into a summary and plots.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RosterKind {
    Crowd,
    Opposing,
    Goal,
    Comfort,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "crowd")]
    pub roster: RosterKind,
    /// Annotators in a crowd roster.
    #[arg(long, default_value_t = 100)]
    pub crowd_size: usize,
    /// Self-inconsistency of opposing or single-annotator rosters.
    #[arg(long, default_value_t = 0.05)]
    pub inconsistency: f64,
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1000)]
    pub segments: usize,
}

impl DataArgs {
    pub fn roster_spec(&self) -> RosterSpec {
        let single = |direction| RosterSpec::Single {
            direction,
            tie_margin: 0.0,
            inconsistency: self.inconsistency,
        };
        match self.roster {
            RosterKind::Crowd => RosterSpec::crowd(self.crowd_size),
            RosterKind::Opposing => RosterSpec::opposing(self.inconsistency),
            RosterKind::Goal => single(GOAL),
            RosterKind::Comfort => single(COMFORT),
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Extra label-flip rate.
    #[arg(long, default_value_t = 0.0)]
    pub flip_rate: f64,
    /// Keep only this many annotators, relabeling their queries.
    #[arg(long)]
    pub annotators: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rebuild the dataset recorded in this manifest instead.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
    #[arg(long, default_value = "dataset.jsonl")]
    pub out: PathBuf,
    /// Also write a buffer of unlabeled episodes from the same task.
    #[arg(long)]
    pub buffer_out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    #[arg(long, default_value_t = 64)]
    pub episode_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Prefmoe,
    Markov,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ArchArgs {
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 16)]
    pub routing_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub intra_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub ffn_mult: usize,
    #[arg(long)]
    pub tanh_head: bool,
    #[arg(long, default_value_t = 32)]
    pub markov_hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub markov_layers: usize,
}

impl ArchArgs {
    fn architecture(&self) -> Architecture {
        Architecture {
            width: self.width,
            routing_dim: self.routing_dim,
            heads: self.heads,
            intra_layers: self.intra_layers,
            ffn_mult: self.ffn_mult,
            tanh_head: self.tanh_head,
            markov_hidden: self.markov_hidden,
            markov_layers: self.markov_layers,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Load-balancing weight.
    #[arg(long, default_value_t = 1e-2)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

impl OptimArgs {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            peak_lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            seed,
            eval_every: self.eval_every,
            grad_clip: self.grad_clip,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "prefmoe")]
    pub model: ModelKind,
    #[arg(long, default_value_t = 4)]
    pub experts: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    /// Seeds both the initialization and the batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = TIE_TOLERANCE)]
    pub tie_tolerance: f64,
    /// Experiment id recorded in the metrics row.
    #[arg(long, default_value = "eval")]
    pub experiment: String,
    /// Seed recorded in the metrics row.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "metrics.jsonl")]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct RelabelArgs {
    #[arg(long)]
    pub buffer: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Window length; defaults to the model's training segment length.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value = "relabeled.jsonl")]
    pub out: PathBuf,
    /// Write per-window routing weights here.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub experiment: Experiment,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub experts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    pub flip_rates: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "10,25,50,100")]
    pub annotators: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = TIE_TOLERANCE)]
    pub tie_tolerance: f64,
    #[arg(long, default_value = "ablation")]
    pub out_dir: PathBuf,
}

impl AblateArgs {
    pub fn spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            experiment: self.experiment,
            experts: self.experts.clone(),
            flip_rates: self.flip_rates.clone(),
            annotators: self.annotators.clone(),
            seeds: self.seeds,
            data_seed: self.data_seed,
            roster: self.data.roster_spec(),
            pairs: self.data.pairs,
            seq_len: self.data.seq_len,
            segments: self.data.segments,
            architecture: self.arch.architecture(),
            train: self.optim.train_config(0),
            tie_tolerance: self.tie_tolerance,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Metrics files to merge.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out_dir: PathBuf,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Json(_) => 3,
        Error::Numerical(_) | Error::Num(_) => 4,
    }
}

/// Parses `args`, runs the command and returns the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn overlay<T: Serialize + DeserializeOwned>(
    args: T,
    name: &str,
    config: Option<&toml::Table>,
) -> Result<T> {
    let Some(table) = config else {
        return Ok(args);
    };
    let mut value = serde_json::to_value(&args)?;
    let obj = value
        .as_object_mut()
        .expect("argument structs serialize to objects");
    let section = match table.get(name) {
        Some(toml::Value::Table(t)) => Some(t),
        _ => None,
    };
    for (k, v) in table.iter().chain(section.into_iter().flatten()) {
        if matches!(v, toml::Value::Table(_)) {
            continue;
        }
        let key = k.replace('-', "_");
        if !obj.contains_key(&key) {
            return Err(Error::Config(format!(
                "unknown config key `{k}` for {name}"
            )));
        }
        obj.insert(key, serde_json::to_value(v)?);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("config file: {e}")))
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let config = config.as_ref();
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&overlay(a, "gen-data", config)?),
        Command::Train(a) => cmd_train(&overlay(a, "train", config)?),
        Command::Eval(a) => cmd_eval(&overlay(a, "eval", config)?),
        Command::Relabel(a) => cmd_relabel(&overlay(a, "relabel", config)?),
        Command::Ablate(a) => cmd_ablate(&overlay(a, "ablate", config)?),
        Command::Report(a) => cmd_report(&overlay(a, "report", config)?),
    }
}

/// Resolves an output path under `PREFMOE_OUT` when it is relative.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.json")
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let data = match &a.from_manifest {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let m: DatasetManifest = serde_json::from_str(&text)?;
            regenerate(&m)?
        }
        None => {
            if a.data.pairs == 0 {
                return Err(Error::Config("--pairs must be >= 1".into()));
            }
            let cfg = GenConfig {
                segments: a.data.segments,
                flip_rate: a.flip_rate,
                subsample: a.annotators.map(|annotators| SubsampleSpec {
                    annotators,
                    preserve_pairs: true,
                }),
                ..GenConfig::desk(a.data.roster_spec(), a.data.pairs, a.data.seq_len)
            };
            generate(&cfg, a.seed)?
        }
    };
    let out = output_path(&a.out);
    write(&out, &datagen::io::to_jsonl(&data)?)?;
    let mut manifest = serde_json::to_string_pretty(&data.manifest)?;
    manifest.push('\n');
    write(&manifest_path(&out), &manifest)?;
    let m = &data.manifest;
    println!(
        "wrote {}: {} records ({} train, {} validation), {} ties, {} flips",
        out.display(),
        m.records,
        m.train,
        m.validation,
        m.ties,
        m.flips.count
    );
    if let Some(p) = &a.buffer_out {
        let mut rng = Rng::new(a.seed).fork("buffer");
        let task = &data.manifest.config.task;
        if a.episodes == 0 || a.episode_len == 0 {
            return Err(Error::Config(
                "--episodes and --episode-len must be >= 1".into(),
            ));
        }
        let episodes = (0..a.episodes)
            .map(|_| task.rollout_len(a.episode_len, &mut rng))
            .collect();
        let buffer = BufferFile {
            buffer: TransitionBuffer::new(episodes)?,
            window: None,
            rewards: None,
        };
        let p = output_path(p);
        write(&p, &buffer.to_jsonl()?)?;
        println!("wrote {}: {} episodes", p.display(), a.episodes);
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<AnyModel> {
    Checkpoint::load(path)?.into_model()
}

fn check_compatible(model: &AnyModel, data: &datagen::Dataset) -> Result<()> {
    let task = &data.manifest.config.task;
    if model.state_dim() != task.state_dim() || model.action_dim() != task.action_dim() {
        return Err(Error::Data(format!(
            "checkpoint expects {}+{} dims but the data has {}+{}",
            model.state_dim(),
            model.action_dim(),
            task.state_dim(),
            task.action_dim()
        )));
    }
    if task.seq_len > model.max_len() {
        return Err(Error::Data(format!(
            "data segments have length {} but the checkpoint accepts at most {}",
            task.seq_len,
            model.max_len()
        )));
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = datagen::io::load(&a.data)?;
    let variant = match a.model {
        ModelKind::Prefmoe => Variant::Prefmoe { experts: a.experts },
        ModelKind::Markov => Variant::Markov,
    };
    let model = a.arch.architecture().build_for(variant, &data, a.seed)?;
    let cfg = a.optim.train_config(a.seed);
    let (model, report) = train(
        model,
        &data.pairs(datagen::Split::Train),
        &data.pairs(datagen::Split::Validation),
        &cfg,
    )?;
    let dir = output_path(&a.out_dir);
    write(
        &dir.join("checkpoint.json"),
        &model.to_checkpoint().to_json()?,
    )?;
    write(&dir.join("train_report.jsonl"), &report.to_jsonl()?)?;
    println!(
        "trained {variant} for {} steps; best validation loss {:.6} at epoch {}; wrote {}",
        report.summary.steps,
        report.summary.best_validation,
        report.summary.best_epoch,
        dir.display()
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let data = datagen::io::load(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    check_compatible(&model, &data)?;
    let metrics = evaluate(
        &model,
        &data.clean_pairs(datagen::Split::Validation),
        a.tie_tolerance,
    )?;
    let variant = match model.spec() {
        ModelSpec::Prefmoe(c) => Variant::Prefmoe { experts: c.experts },
        ModelSpec::Markov(_) => Variant::Markov,
    };
    let params = Condition {
        model: variant,
        flip_rate: data.manifest.config.flip_rate,
        annotators: data
            .manifest
            .config
            .subsample
            .as_ref()
            .map(|s| s.annotators),
    };
    let mut row = MetricsRow::new(&a.experiment, params, a.seed, &metrics);
    row.flip_digest = Some(data.manifest.flips.digest.clone());
    let mut line = serde_json::to_string(&MetricsLine::Row(row))?;
    line.push('\n');
    let out = output_path(&a.out);
    write(&out, &line)?;
    println!(
        "accuracy {:.4}, bt loss {:.6} on {} pairs; wrote {}",
        metrics.accuracy,
        metrics.bt_loss,
        metrics.pairs,
        out.display()
    );
    Ok(())
}

pub fn cmd_relabel(a: &RelabelArgs) -> Result<()> {
    let file = BufferFile::load(&a.buffer)?;
    let model = load_model(&a.checkpoint)?;
    let cfg = RelabelConfig {
        window: a.window.unwrap_or(model.max_len()),
    };
    let out = relabel_with_routing(&model, &file.buffer, &cfg)?;
    let relabeled = BufferFile {
        buffer: file.buffer,
        window: Some(cfg.window),
        rewards: Some(out.rewards),
    };
    let path = output_path(&a.out);
    write(&path, &relabeled.to_jsonl()?)?;
    if let Some(t) = &a.trace_out {
        let routing = out
            .routing
            .ok_or_else(|| Error::Input("the checkpoint's model has no router to trace".into()))?;
        let mut text = String::new();
        for (episode, rows) in routing.iter().enumerate() {
            text.push_str(&serde_json::to_string(&serde_json::json!({
                "episode": episode,
                "routing": rows
            }))?);
            text.push('\n');
        }
        write(&output_path(t), &text)?;
    }
    println!(
        "relabeled {} transitions with window {}; wrote {}",
        relabeled.buffer.transitions(),
        cfg.window,
        path.display()
    );
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let spec = a.spec();
    let dir = output_path(&a.out_dir);
    let out = run_ablation(&spec, |line| match line {
        MetricsLine::Row(r) => eprintln!(
            "{} {} seed {}: accuracy {:.4}",
            r.experiment,
            r.condition,
            r.seed.unwrap_or_default(),
            r.accuracy
        ),
        MetricsLine::Failure(f) => {
            eprintln!("{} {} failed: {}", f.experiment, f.condition, f.error)
        }
        MetricsLine::Summary(_) => {}
    })?;
    write(&dir.join("metrics.jsonl"), &out.to_jsonl()?)?;
    let mut spec_json = serde_json::to_string_pretty(&spec)?;
    spec_json.push('\n');
    write(&dir.join("spec.json"), &spec_json)?;
    for s in &out.summaries {
        if let Some(acc) = s.accuracy {
            println!(
                "{:<28} accuracy {:.4} ± {:.4} (n={})",
                s.condition, acc.mean, acc.std, acc.n
            );
        }
    }
    if !out.failures.is_empty() {
        eprintln!("{} runs failed; see metrics.jsonl", out.failures.len());
    }
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let table = MetricsTable::load(&a.metrics)?;
    let dir = output_path(&a.out_dir);
    let report = write_report(&table, &dir)?;
    println!(
        "{} conditions, {} plots; wrote {}\nnote: {}",
        report.conditions.len(),
        report.plots.len(),
        dir.display(),
        report.note
    );
    Ok(())
}
