//! Ablation protocols: model-and-data grids crossed with seeds, producing one
//! metrics row per run and a mean ± std summary per condition.
//!
//! Every condition draws its dataset from the same data seed, so datasets
//! differ only in the knob under study. In the noise ablation the flipped
//! record sets are therefore nested across rates and shared by every model
//! variant; the flip digest in each row's manifest makes this checkable.
//!
//! Scores are held-out preference accuracy against the annotators' own
//! (pre-corruption) validation labels.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datagen::{
    generate, Dataset, GenConfig, RosterSpec, Split, SubsampleSpec, SyntheticTaskConfig,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMetrics, TIE_TOLERANCE};
use crate::model::{AnyModel, MarkovConfig, MarkovReward, ModelConfig, PrefMoe};
use crate::trainer::{train, TrainConfig, TrainReport};

pub const METRIC_NOTE: &str =
    "scores are held-out preference accuracy on clean validation labels, \
standing in for downstream policy returns, which are not computed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    AblateK,
    AblateNoise,
    AblateAnnotators,
    CompareBaselines,
}

impl Experiment {
    pub fn id(self) -> &'static str {
        match self {
            Experiment::AblateK => "ablate-k",
            Experiment::AblateNoise => "ablate-noise",
            Experiment::AblateAnnotators => "ablate-annotators",
            Experiment::CompareBaselines => "compare-baselines",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Variant {
    Prefmoe { experts: usize },
    Markov,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Prefmoe { experts } => write!(f, "prefmoe-k{experts}"),
            Variant::Markov => f.write_str("markov"),
        }
    }
}

/// Architecture hyperparameters shared by every model in a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub width: usize,
    pub routing_dim: usize,
    pub heads: usize,
    pub intra_layers: usize,
    pub ffn_mult: usize,
    pub tanh_head: bool,
    pub markov_hidden: usize,
    pub markov_layers: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        let m = ModelConfig::desk(1, 1, 1, 1);
        let mr = MarkovConfig::desk(1, 1);
        Architecture {
            width: m.width,
            routing_dim: m.routing_dim,
            heads: m.heads,
            intra_layers: m.intra_layers,
            ffn_mult: m.ffn_mult,
            tanh_head: m.tanh_head,
            markov_hidden: mr.hidden,
            markov_layers: mr.layers,
        }
    }
}

impl Architecture {
    pub fn build(
        &self,
        variant: Variant,
        state_dim: usize,
        action_dim: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<AnyModel> {
        Ok(match variant {
            Variant::Prefmoe { experts } => AnyModel::PrefMoe(PrefMoe::new(
                ModelConfig {
                    state_dim,
                    action_dim,
                    max_len,
                    width: self.width,
                    routing_dim: self.routing_dim,
                    experts,
                    heads: self.heads,
                    intra_layers: self.intra_layers,
                    ffn_mult: self.ffn_mult,
                    tanh_head: self.tanh_head,
                },
                seed,
            )?),
            Variant::Markov => AnyModel::Markov(MarkovReward::new(
                MarkovConfig {
                    state_dim,
                    action_dim,
                    hidden: self.markov_hidden,
                    layers: self.markov_layers,
                },
                seed,
            )?),
        })
    }

    /// Builds a model sized for `data`'s segments.
    pub fn build_for(&self, variant: Variant, data: &Dataset, seed: u64) -> Result<AnyModel> {
        let task = &data.manifest.config.task;
        self.build(
            variant,
            task.state_dim(),
            task.action_dim(),
            task.seq_len,
            seed,
        )
    }
}

/// Trains on the training split, selects by validation loss on the labels
/// as stored, and scores the selected model against clean validation labels.
pub fn train_and_evaluate(
    model: AnyModel,
    data: &Dataset,
    cfg: &TrainConfig,
    tie_tolerance: f64,
) -> Result<(AnyModel, TrainReport, EvalMetrics)> {
    let (model, report) = train(
        model,
        &data.pairs(Split::Train),
        &data.pairs(Split::Validation),
        cfg,
    )?;
    let metrics = evaluate(&model, &data.clean_pairs(Split::Validation), tie_tolerance)?;
    Ok((model, report, metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    /// Expert counts; for the baseline comparison, the PrefMoE variants set
    /// beside the Markovian model.
    pub experts: Vec<usize>,
    pub flip_rates: Vec<f64>,
    pub annotators: Vec<usize>,
    /// Runs per condition, with model seeds `0..seeds`.
    pub seeds: usize,
    pub data_seed: u64,
    pub roster: RosterSpec,
    pub pairs: usize,
    pub seq_len: usize,
    pub segments: usize,
    pub architecture: Architecture,
    /// Training settings; `seed` is replaced by each run's seed.
    pub train: TrainConfig,
    pub tie_tolerance: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            experiment: Experiment::AblateK,
            experts: vec![1, 2, 4],
            flip_rates: vec![0.0, 0.1, 0.2, 0.3],
            annotators: vec![10, 25, 50, 100],
            seeds: 5,
            data_seed: 0,
            roster: RosterSpec::crowd(100),
            pairs: 2000,
            seq_len: 16,
            segments: 1000,
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            tie_tolerance: TIE_TOLERANCE,
        }
    }
}

/// One cell of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub model: Variant,
    pub flip_rate: f64,
    pub annotators: Option<usize>,
}

impl Condition {
    pub fn label(&self) -> String {
        let mut s = self.model.to_string();
        if self.flip_rate != 0.0 {
            s.push_str(&format!("/dp{}", self.flip_rate));
        }
        if let Some(n) = self.annotators {
            s.push_str(&format!("/n{n}"));
        }
        s
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.seeds == 0 {
            return bad("seeds must be >= 1");
        }
        if self.experts.is_empty() || self.experts.contains(&0) {
            return bad("expert grid must be non-empty with K >= 1");
        }
        match self.experiment {
            Experiment::AblateNoise if self.flip_rates.is_empty() => {
                return bad("flip-rate grid is empty")
            }
            Experiment::AblateNoise if self.flip_rates.iter().any(|p| !(0.0..=1.0).contains(p)) => {
                return bad("flip rates must lie in [0, 1]")
            }
            Experiment::AblateAnnotators
                if self.annotators.is_empty() || self.annotators.contains(&0) =>
            {
                return bad("annotator grid must be non-empty with N >= 1")
            }
            _ => {}
        }
        self.train.validate()?;
        self.gen_config(&self.conditions()[0])?.validate()
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let prefmoe = |k: usize| Variant::Prefmoe { experts: k };
        let plain = |model| Condition {
            model,
            flip_rate: 0.0,
            annotators: None,
        };
        match self.experiment {
            Experiment::AblateK => self.experts.iter().map(|&k| plain(prefmoe(k))).collect(),
            Experiment::CompareBaselines => std::iter::once(Variant::Markov)
                .chain(self.experts.iter().map(|&k| prefmoe(k)))
                .map(plain)
                .collect(),
            Experiment::AblateNoise => self
                .flip_rates
                .iter()
                .flat_map(|&p| {
                    self.experts.iter().map(move |&k| Condition {
                        model: prefmoe(k),
                        flip_rate: p,
                        annotators: None,
                    })
                })
                .collect(),
            Experiment::AblateAnnotators => self
                .annotators
                .iter()
                .flat_map(|&n| {
                    self.experts.iter().map(move |&k| Condition {
                        model: prefmoe(k),
                        flip_rate: 0.0,
                        annotators: Some(n),
                    })
                })
                .collect(),
        }
    }

    pub fn gen_config(&self, c: &Condition) -> Result<GenConfig> {
        Ok(GenConfig {
            task: SyntheticTaskConfig::desk(self.seq_len),
            roster: self.roster.clone(),
            segments: self.segments,
            pairs: self.pairs,
            flip_rate: c.flip_rate,
            subsample: c.annotators.map(|annotators| SubsampleSpec {
                annotators,
                preserve_pairs: true,
            }),
            ..GenConfig::desk(self.roster.clone(), self.pairs, self.seq_len)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub condition: String,
    pub params: Condition,
    pub seed: Option<u64>,
    pub accuracy: f64,
    pub bt_loss: f64,
    pub usage: Option<Vec<f64>>,
    pub max_usage: Option<f64>,
    /// Accuracy relative to the same model and seed at `Δp = 0`.
    pub retention: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Digest of the flipped record set of the dataset used.
    pub flip_digest: Option<String>,
}

impl MetricsRow {
    pub fn new(experiment: &str, params: Condition, seed: Option<u64>, m: &EvalMetrics) -> Self {
        MetricsRow {
            experiment: experiment.to_string(),
            condition: params.label(),
            params,
            seed,
            accuracy: m.accuracy,
            bt_loss: m.bt_loss,
            usage: m.usage.clone(),
            max_usage: m.max_usage,
            retention: None,
            best_epoch: None,
            flip_digest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub experiment: String,
    pub condition: String,
    pub seed: Option<u64>,
    pub error: String,
}

/// Mean and sample standard deviation (`n − 1`; zero for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Stat { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub experiment: String,
    pub condition: String,
    pub params: Condition,
    pub runs: usize,
    pub failures: usize,
    pub accuracy: Option<Stat>,
    pub bt_loss: Option<Stat>,
    pub max_usage: Option<Stat>,
    pub retention: Option<Stat>,
    /// Per-expert mean usage across runs.
    pub usage: Option<Vec<f64>>,
}

/// Groups rows by (experiment, condition) in order of first appearance.
pub fn summarize(rows: &[MetricsRow], failures: &[RunFailure]) -> Vec<ConditionSummary> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), (Condition, Vec<&MetricsRow>, usize)> =
        BTreeMap::new();
    for r in rows {
        let key = (r.experiment.clone(), r.condition.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                (r.params.clone(), Vec::new(), 0)
            })
            .1
            .push(r);
    }
    for f in failures {
        if let Some(g) = groups.get_mut(&(f.experiment.clone(), f.condition.clone())) {
            g.2 += 1;
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (params, rs, failures) = groups.remove(&key).expect("grouped key");
            let col = |f: fn(&MetricsRow) -> Option<f64>| -> Option<Stat> {
                let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                Stat::of(&v)
            };
            let usage = rs
                .iter()
                .map(|r| r.usage.as_deref())
                .collect::<Option<Vec<_>>>()
                .and_then(|us| {
                    let k = us.first()?.len();
                    us.iter().all(|u| u.len() == k).then(|| {
                        (0..k)
                            .map(|j| us.iter().map(|u| u[j]).sum::<f64>() / us.len() as f64)
                            .collect()
                    })
                });
            ConditionSummary {
                experiment: key.0,
                condition: key.1,
                params,
                runs: rs.len(),
                failures,
                accuracy: col(|r| Some(r.accuracy)),
                bt_loss: col(|r| Some(r.bt_loss)),
                max_usage: col(|r| r.max_usage),
                retention: col(|r| r.retention),
                usage,
            }
        })
        .collect()
}

/// One line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsLine {
    Row(MetricsRow),
    Failure(RunFailure),
    Summary(ConditionSummary),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutput {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<RunFailure>,
    pub summaries: Vec<ConditionSummary>,
}

impl AblationOutput {
    /// Rows and failures in run order, then one summary per condition.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let lines = self
            .rows
            .iter()
            .cloned()
            .map(MetricsLine::Row)
            .chain(self.failures.iter().cloned().map(MetricsLine::Failure))
            .chain(self.summaries.iter().cloned().map(MetricsLine::Summary));
        for l in lines {
            out.push_str(&serde_json::to_string(&l)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn condition_rows(&self, condition: &str) -> Vec<&MetricsRow> {
        self.rows
            .iter()
            .filter(|r| r.condition == condition)
            .collect()
    }
}

/// Runs every condition × seed sequentially. Failed runs are recorded and
/// the grid continues; `progress` sees each row or failure as it lands.
pub fn run_ablation(
    spec: &ExperimentSpec,
    mut progress: impl FnMut(&MetricsLine),
) -> Result<AblationOutput> {
    spec.validate()?;
    let id = spec.experiment.id();
    let mut datasets: Vec<(GenConfig, Dataset)> = Vec::new();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut failures = Vec::new();
    for c in spec.conditions() {
        let gen = spec.gen_config(&c)?;
        let data = match datasets.iter().position(|(g, _)| *g == gen) {
            Some(i) => &datasets[i].1,
            None => {
                let d = generate(&gen, spec.data_seed)?;
                datasets.push((gen, d));
                &datasets.last().expect("just pushed").1
            }
        };
        for seed in 0..spec.seeds as u64 {
            let cfg = TrainConfig {
                seed,
                ..spec.train.clone()
            };
            let run = spec
                .architecture
                .build_for(c.model, data, seed)
                .and_then(|m| train_and_evaluate(m, data, &cfg, spec.tie_tolerance));
            match run {
                Ok((_, report, metrics)) => {
                    let mut row = MetricsRow::new(id, c.clone(), Some(seed), &metrics);
                    row.best_epoch = Some(report.summary.best_epoch);
                    row.flip_digest = Some(data.manifest.flips.digest.clone());
                    progress(&MetricsLine::Row(row.clone()));
                    rows.push(row);
                }
                Err(e) => {
                    let f = RunFailure {
                        experiment: id.to_string(),
                        condition: c.label(),
                        seed: Some(seed),
                        error: e.to_string(),
                    };
                    progress(&MetricsLine::Failure(f.clone()));
                    failures.push(f);
                }
            }
        }
    }
    if spec.experiment == Experiment::AblateNoise {
        fill_retention(&mut rows);
    }
    let summaries = summarize(&rows, &failures);
    Ok(AblationOutput {
        rows,
        failures,
        summaries,
    })
}

/// Sets each row's retention against the `Δp = 0` row of the same model
/// and seed, when that row exists and scored above zero.
pub fn fill_retention(rows: &mut [MetricsRow]) {
    let base: BTreeMap<(Variant, Option<u64>), f64> = rows
        .iter()
        .filter(|r| r.params.flip_rate == 0.0)
        .map(|r| ((r.params.model, r.seed), r.accuracy))
        .collect();
    for r in rows {
        r.retention = base
            .get(&(r.params.model, r.seed))
            .filter(|&&b| b > 0.0)
            .map(|b| r.accuracy / b);
    }
}
