//! Preference pools: query sampling, label corruption, annotator
//! subsampling, train/validation split and the seeded end-to-end pipeline.

use std::collections::{BTreeMap, BTreeSet};

use numcore::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::annotator::{build_roster, AnnotatorProfile, RosterSpec};
use super::task::{gen_segments, StoredSegment, SyntheticTaskConfig};
use crate::error::{Error, Result};
use crate::objective::{PairBatch, PreferenceLabel};
use crate::segment::Segment;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    /// Segment indices of σ⁰ and σ¹.
    pub first: usize,
    pub second: usize,
    /// Label used for training, after any injected flips.
    pub label: PreferenceLabel,
    pub annotator: u32,
    /// Position of the query in labeling order.
    pub query: u64,
    /// Whether synthetic corruption inverted this label.
    pub flipped: bool,
    pub split: Split,
}

impl PreferenceRecord {
    /// The annotator's own label, before injected flips.
    pub fn clean_label(&self) -> PreferenceLabel {
        if self.flipped {
            self.label.flipped()
        } else {
            self.label
        }
    }
}

/// Which annotators to keep and whether to preserve the pair count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub annotators: usize,
    /// Re-label every query with retained annotators instead of dropping
    /// records, so all pool sizes share one pair count.
    pub preserve_pairs: bool,
}

/// Every knob of dataset generation; together with the seed it determines
/// the dataset completely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub task: SyntheticTaskConfig,
    pub roster: RosterSpec,
    pub segments: usize,
    pub pairs: usize,
    /// Fraction of queries that repeat an earlier pair.
    pub repeat_fraction: f64,
    pub train_fraction: f64,
    /// Additional label-flip rate `Δp`.
    pub flip_rate: f64,
    pub subsample: Option<SubsampleSpec>,
}

impl GenConfig {
    pub fn desk(roster: RosterSpec, pairs: usize, seq_len: usize) -> Self {
        GenConfig {
            task: SyntheticTaskConfig::desk(seq_len),
            roster,
            segments: 1000,
            pairs,
            repeat_fraction: 0.05,
            train_fraction: 0.9,
            flip_rate: 0.0,
            subsample: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.pairs == 0 {
            return Err(Error::Config("pairs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.repeat_fraction) {
            return Err(Error::Config("repeat_fraction must lie in [0, 1]".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(Error::Config("flip_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipSummary {
    pub rate: f64,
    pub count: usize,
    /// SHA-256 over the sorted flipped record indices, one decimal per line.
    pub digest: String,
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: GenConfig,
    pub roster: Vec<AnnotatorProfile>,
    pub segments: usize,
    pub records: usize,
    pub train: usize,
    pub validation: usize,
    pub ties: usize,
    pub flips: FlipSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub segments: Vec<StoredSegment>,
    pub records: Vec<PreferenceRecord>,
}

/// One labelled comparison, detached from the segment store.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub first: Segment,
    pub second: Segment,
    pub label: PreferenceLabel,
}

impl LabeledPair {
    pub fn batch<'a>(pairs: impl IntoIterator<Item = &'a LabeledPair>) -> Result<PairBatch> {
        PairBatch::from_pairs(pairs.into_iter().map(|p| (&p.first, &p.second, p.label)))
    }
}

impl Dataset {
    pub fn records(&self, split: Split) -> impl Iterator<Item = &PreferenceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Pairs of one split with training labels.
    pub fn pairs(&self, split: Split) -> Vec<LabeledPair> {
        self.records(split).map(|r| self.pair(r, r.label)).collect()
    }

    /// Pairs of one split with pre-corruption labels.
    pub fn clean_pairs(&self, split: Split) -> Vec<LabeledPair> {
        self.records(split)
            .map(|r| self.pair(r, r.clean_label()))
            .collect()
    }

    fn pair(&self, r: &PreferenceRecord, label: PreferenceLabel) -> LabeledPair {
        LabeledPair {
            first: self.segments[r.first].segment.clone(),
            second: self.segments[r.second].segment.clone(),
            label,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.segments.len();
        let ids: BTreeSet<u32> = self.manifest.roster.iter().map(|p| p.id).collect();
        for (i, r) in self.records.iter().enumerate() {
            if r.first == r.second || r.first >= n || r.second >= n {
                return Err(Error::Data(format!(
                    "record {i}: invalid segment indices ({}, {})",
                    r.first, r.second
                )));
            }
            if !ids.contains(&r.annotator) {
                return Err(Error::Data(format!(
                    "record {i}: unknown annotator {}",
                    r.annotator
                )));
            }
        }
        Ok(())
    }
}

fn sample_pair(n: usize, rng: &mut Rng) -> (usize, usize) {
    let ij = rng.sample_indices(n, 2);
    (ij[0], ij[1])
}

/// Samples `n_pairs` queries and labels them.
///
/// A fresh query draws two distinct segments uniformly and an annotator
/// uniformly from the roster. With probability `repeat_fraction` a query
/// instead re-asks an earlier pair, put to the same annotator half of the
/// time (measuring self-consistency) and to a uniformly drawn annotator
/// otherwise (measuring disagreement).
pub fn build_pool(
    store: &[StoredSegment],
    roster: &[AnnotatorProfile],
    n_pairs: usize,
    repeat_fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<PreferenceRecord>> {
    if store.len() < 2 {
        return Err(Error::Data(
            "segment store needs at least two segments".into(),
        ));
    }
    if roster.is_empty() || n_pairs == 0 {
        return Err(Error::Config(
            "need a non-empty roster and n_pairs >= 1".into(),
        ));
    }
    let mut records: Vec<PreferenceRecord> = Vec::with_capacity(n_pairs);
    for q in 0..n_pairs {
        let repeat = rng.uniform() < repeat_fraction && !records.is_empty();
        let (first, second, who) = if repeat {
            let prev = &records[rng.index(records.len())];
            let who = if rng.bernoulli(0.5) {
                roster
                    .iter()
                    .position(|p| p.id == prev.annotator)
                    .expect("annotator in roster")
            } else {
                rng.index(roster.len())
            };
            (prev.first, prev.second, who)
        } else {
            let (i, j) = sample_pair(store.len(), rng);
            (i, j, rng.index(roster.len()))
        };
        let profile = &roster[who];
        let label = profile.label(&store[first].features, &store[second].features, rng);
        records.push(PreferenceRecord {
            first,
            second,
            label,
            annotator: profile.id,
            query: q as u64,
            flipped: false,
            split: Split::Train,
        });
    }
    Ok(records)
}

fn flip_digest(indices: &[usize]) -> String {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for i in sorted {
        h.update(format!("{i}\n").as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Inverts exactly `round(Δp · #non-tie)` non-tie labels.
///
/// The candidates are ordered by one seeded permutation and the first ones
/// are flipped, so for a fixed stream the flip set at a lower rate is a
/// subset of the set at a higher rate.
pub fn inject_flips(
    records: &mut [PreferenceRecord],
    rate: f64,
    rng: &mut Rng,
) -> Result<FlipSummary> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("flip rate {rate} outside [0, 1]")));
    }
    let mut candidates: Vec<usize> = (0..records.len())
        .filter(|&i| !records[i].label.is_tie())
        .collect();
    rng.shuffle(&mut candidates);
    let count = (rate * candidates.len() as f64).round() as usize;
    let chosen = &candidates[..count];
    for &i in chosen {
        let r = &mut records[i];
        r.label = r.label.flipped();
        r.flipped = !r.flipped;
    }
    Ok(FlipSummary {
        rate,
        count,
        digest: flip_digest(chosen),
    })
}

/// Keeps a uniformly chosen subset of `spec.annotators` roster members.
///
/// Without `preserve_pairs`, records of dropped annotators are removed. With
/// it, every query is re-labeled by a retained annotator drawn uniformly, so
/// the record count is unchanged.
pub fn subsample_annotators(
    records: Vec<PreferenceRecord>,
    store: &[StoredSegment],
    roster: &[AnnotatorProfile],
    spec: &SubsampleSpec,
    rng: &mut Rng,
) -> Result<(Vec<PreferenceRecord>, Vec<AnnotatorProfile>)> {
    if spec.annotators == 0 || spec.annotators > roster.len() {
        return Err(Error::Config(format!(
            "cannot keep {} of {} annotators",
            spec.annotators,
            roster.len()
        )));
    }
    if spec.annotators == roster.len() {
        return Ok((records, roster.to_vec()));
    }
    let mut keep = rng.sample_indices(roster.len(), spec.annotators);
    keep.sort_unstable();
    let kept: Vec<AnnotatorProfile> = keep.iter().map(|&i| roster[i].clone()).collect();
    let ids: BTreeSet<u32> = kept.iter().map(|p| p.id).collect();
    let out = if spec.preserve_pairs {
        records
            .into_iter()
            .map(|r| {
                let p = &kept[rng.index(kept.len())];
                let label = p.label(&store[r.first].features, &store[r.second].features, rng);
                PreferenceRecord {
                    label,
                    annotator: p.id,
                    ..r
                }
            })
            .collect()
    } else {
        records
            .into_iter()
            .filter(|r| ids.contains(&r.annotator))
            .collect()
    };
    Ok((out, kept))
}

/// Seeded split with `round(fraction · n)` training records.
pub fn split(
    records: &mut [PreferenceRecord],
    fraction: f64,
    rng: &mut Rng,
) -> Result<(usize, usize)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    let n = records.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Data(format!(
            "split of {n} records at {fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    for (rank, &i) in order.iter().enumerate() {
        records[i].split = if rank < n_train {
            Split::Train
        } else {
            Split::Validation
        };
    }
    Ok((n_train, n - n_train))
}

/// Full pipeline: segments, roster, queries, optional subsampling, flips,
/// split. Each stage reads its own sub-stream of the seed.
pub fn generate(config: &GenConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let root = Rng::new(seed);
    let segments = gen_segments(&config.task, config.segments, &root.fork("segments"))?;
    let mut roster = build_roster(&config.roster, &segments, &mut root.fork("roster"))?;
    let mut records = build_pool(
        &segments,
        &roster,
        config.pairs,
        config.repeat_fraction,
        &mut root.fork("pool"),
    )?;
    if let Some(spec) = &config.subsample {
        let (r, kept) = subsample_annotators(
            records,
            &segments,
            &roster,
            spec,
            &mut root.fork("subsample"),
        )?;
        records = r;
        roster = kept;
    }
    let flips = inject_flips(&mut records, config.flip_rate, &mut root.fork("flips"))?;
    let (train, validation) = split(&mut records, config.train_fraction, &mut root.fork("split"))?;
    let ties = records.iter().filter(|r| r.label.is_tie()).count();
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        seed,
        config: config.clone(),
        roster,
        segments: segments.len(),
        records: records.len(),
        train,
        validation,
        ties,
        flips,
    };
    Ok(Dataset {
        manifest,
        segments,
        records,
    })
}

/// Rebuilds a dataset from the generation settings recorded in its manifest.
pub fn regenerate(manifest: &DatasetManifest) -> Result<Dataset> {
    generate(&manifest.config, manifest.seed)
}

/// Conflict rates on queries asked more than once.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    /// Fraction of record pairs on the same segment pair, from different
    /// annotators, carrying different labels.
    pub inter: f64,
    pub inter_comparisons: usize,
    /// Same, for record pairs from the same annotator.
    pub intra: f64,
    pub intra_comparisons: usize,
}

/// Compares every two records that share a segment pair (order-normalized).
pub fn disagreement(records: &[PreferenceRecord]) -> Disagreement {
    let mut groups: BTreeMap<(usize, usize), Vec<(u32, f64)>> = BTreeMap::new();
    for r in records {
        // express labels relative to the lower segment index
        let (key, y) = if r.first < r.second {
            ((r.first, r.second), r.label.value())
        } else {
            ((r.second, r.first), 1.0 - r.label.value())
        };
        groups.entry(key).or_default().push((r.annotator, y));
    }
    let (mut inter, mut inter_n, mut intra, mut intra_n) = (0usize, 0usize, 0usize, 0usize);
    for g in groups.values() {
        for a in 0..g.len() {
            for b in a + 1..g.len() {
                let differ = (g[a].1 != g[b].1) as usize;
                if g[a].0 == g[b].0 {
                    intra += differ;
                    intra_n += 1;
                } else {
                    inter += differ;
                    inter_n += 1;
                }
            }
        }
    }
    let rate = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Disagreement {
        inter: rate(inter, inter_n),
        inter_comparisons: inter_n,
        intra: rate(intra, intra_n),
        intra_comparisons: intra_n,
    }
}
