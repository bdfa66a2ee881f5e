//! Synthetic preference data: a point-mass task, simulated annotators with
//! differing criteria and self-inconsistency, and seeded pool construction.

mod annotator;
pub mod io;
mod pool;
mod task;

pub use annotator::{
    build_roster, feature_spread, AnnotatorProfile, Archetype, RosterSpec, COMFORT, GOAL,
};
pub use pool::{
    build_pool, disagreement, generate, inject_flips, regenerate, split, subsample_annotators,
    Dataset, DatasetManifest, Disagreement, FlipSummary, GenConfig, LabeledPair, PreferenceRecord,
    Split, SubsampleSpec, DATASET_VERSION,
};
pub use task::{gen_segments, StoredSegment, SyntheticTaskConfig, FEATURES, FEATURE_NAMES};
