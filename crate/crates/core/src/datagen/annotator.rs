//! Simulated annotators and rosters of them.
//!
//! An annotator scores a segment by `u = wᵀΦ(σ)` and labels a pair by
//! comparing the two scores: a tie inside the margin `τ`, otherwise the
//! higher score wins (deterministically, or with probability
//! `logistic(Δu / β)` when the decision temperature `β > 0`). The label is
//! then inverted with probability `δ`, which models the same person
//! answering the same query differently over time.

use numcore::{logistic, Rng};
use serde::{Deserialize, Serialize};

use super::task::{StoredSegment, FEATURES};
use crate::error::{Error, Result};
use crate::objective::PreferenceLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub id: u32,
    /// Criterion weights over the task features.
    pub weights: [f64; FEATURES],
    /// Tie margin `τ ≥ 0`.
    pub tie_margin: f64,
    /// Inconsistency rate `δ ∈ [0, 1]`.
    pub inconsistency: f64,
    /// Decision temperature `β ≥ 0`; zero means a hard comparison.
    pub temperature: f64,
}

impl AnnotatorProfile {
    pub fn new(id: u32, weights: [f64; FEATURES]) -> Self {
        AnnotatorProfile {
            id,
            weights,
            tie_margin: 0.0,
            inconsistency: 0.0,
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.inconsistency) {
            return Err(Error::Config(format!(
                "annotator {}: inconsistency outside [0, 1]",
                self.id
            )));
        }
        if !(self.tie_margin >= 0.0) || !(self.temperature >= 0.0) {
            return Err(Error::Config(format!(
                "annotator {}: negative margin or temperature",
                self.id
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config(format!(
                "annotator {}: non-finite weights",
                self.id
            )));
        }
        Ok(())
    }

    pub fn utility(&self, features: &[f64; FEATURES]) -> f64 {
        self.weights.iter().zip(features).map(|(w, f)| w * f).sum()
    }

    /// Label for the pair `(σ⁰, σ¹)`; `One` means σ¹ is preferred.
    ///
    /// Always consumes exactly two uniforms so the stream position does not
    /// depend on the outcome.
    pub fn label(
        &self,
        first: &[f64; FEATURES],
        second: &[f64; FEATURES],
        rng: &mut Rng,
    ) -> PreferenceLabel {
        let choice = rng.uniform();
        let slip = rng.uniform();
        let diff = self.utility(second) - self.utility(first);
        if diff.abs() < self.tie_margin {
            return PreferenceLabel::Tie;
        }
        let prefers_second = if self.temperature > 0.0 {
            choice < logistic(diff / self.temperature)
        } else {
            diff > 0.0
        };
        let label = if prefers_second {
            PreferenceLabel::One
        } else {
            PreferenceLabel::Zero
        };
        if slip < self.inconsistency {
            label.flipped()
        } else {
            label
        }
    }
}

/// Direction in standardized feature units; converted to raw weights by
/// dividing by each feature's spread across the segment store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub name: String,
    pub direction: [f64; FEATURES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RosterSpec {
    /// One annotator.
    Single {
        direction: [f64; FEATURES],
        tie_margin: f64,
        inconsistency: f64,
    },
    /// Two annotators with conflicting criteria: one rewards goal progress
    /// only, the other rewards low effort and smooth control only.
    Opposing { inconsistency: f64 },
    /// `size` annotators cycling through the archetypes, each with a
    /// Gaussian perturbation of its direction and individual noise levels.
    Crowd {
        size: usize,
        archetypes: Vec<Archetype>,
        direction_noise: f64,
        inconsistency_range: (f64, f64),
        tie_margin: f64,
        temperature_range: (f64, f64),
    },
    /// Explicit profiles, used as given.
    Explicit { profiles: Vec<AnnotatorProfile> },
}

pub const GOAL: [f64; FEATURES] = [1.0, 0.0, 0.0];
pub const COMFORT: [f64; FEATURES] = [0.0, 0.7, 0.7];

impl RosterSpec {
    pub fn opposing(inconsistency: f64) -> Self {
        RosterSpec::Opposing { inconsistency }
    }

    /// Heterogeneous 100-annotator crowd over three archetypes.
    pub fn crowd(size: usize) -> Self {
        RosterSpec::Crowd {
            size,
            archetypes: vec![
                Archetype {
                    name: "goal".into(),
                    direction: GOAL,
                },
                Archetype {
                    name: "comfort".into(),
                    direction: COMFORT,
                },
                Archetype {
                    name: "smooth".into(),
                    direction: [0.3, 0.0, 1.0],
                },
            ],
            direction_noise: 0.15,
            inconsistency_range: (0.0, 0.15),
            tie_margin: 0.0,
            temperature_range: (0.0, 0.0),
        }
    }
}

/// Per-feature standard deviation of `Φ` over the store (1 where degenerate).
pub fn feature_spread(store: &[StoredSegment]) -> [f64; FEATURES] {
    let n = store.len() as f64;
    let mut out = [1.0; FEATURES];
    for (f, slot) in out.iter_mut().enumerate() {
        let mean = store.iter().map(|s| s.features[f]).sum::<f64>() / n;
        let var = store
            .iter()
            .map(|s| (s.features[f] - mean).powi(2))
            .sum::<f64>()
            / n;
        if var > 0.0 {
            *slot = var.sqrt();
        }
    }
    out
}

fn scaled(direction: &[f64; FEATURES], spread: &[f64; FEATURES]) -> [f64; FEATURES] {
    let mut w = [0.0; FEATURES];
    for f in 0..FEATURES {
        w[f] = direction[f] / spread[f];
    }
    w
}

pub fn build_roster(
    spec: &RosterSpec,
    store: &[StoredSegment],
    rng: &mut Rng,
) -> Result<Vec<AnnotatorProfile>> {
    let spread = feature_spread(store);
    let roster = match spec {
        RosterSpec::Single {
            direction,
            tie_margin,
            inconsistency,
        } => vec![AnnotatorProfile {
            tie_margin: *tie_margin,
            inconsistency: *inconsistency,
            ..AnnotatorProfile::new(0, scaled(direction, &spread))
        }],
        RosterSpec::Opposing { inconsistency } => [GOAL, COMFORT]
            .iter()
            .enumerate()
            .map(|(i, d)| AnnotatorProfile {
                inconsistency: *inconsistency,
                ..AnnotatorProfile::new(i as u32, scaled(d, &spread))
            })
            .collect(),
        RosterSpec::Crowd {
            size,
            archetypes,
            direction_noise,
            inconsistency_range,
            tie_margin,
            temperature_range,
        } => {
            if archetypes.is_empty() {
                return Err(Error::Config(
                    "crowd roster needs at least one archetype".into(),
                ));
            }
            (0..*size)
                .map(|i| {
                    let base = &archetypes[i % archetypes.len()].direction;
                    let mut d = [0.0; FEATURES];
                    for f in 0..FEATURES {
                        d[f] = base[f] + direction_noise * rng.normal();
                    }
                    AnnotatorProfile {
                        id: i as u32,
                        weights: scaled(&d, &spread),
                        tie_margin: *tie_margin,
                        inconsistency: rng
                            .uniform_range(inconsistency_range.0, inconsistency_range.1),
                        temperature: rng.uniform_range(temperature_range.0, temperature_range.1),
                    }
                })
                .collect()
        }
        RosterSpec::Explicit { profiles } => profiles.clone(),
    };
    if roster.is_empty() {
        return Err(Error::Config("roster is empty".into()));
    }
    for p in &roster {
        p.validate()?;
    }
    Ok(roster)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_and_sign_cases() {
        let f0 = [1.0, 0.0, 0.0];
        let f1 = [2.0, 0.0, 0.0];
        let mut a = AnnotatorProfile::new(0, [1.0, 0.0, 0.0]);
        assert_eq!(a.label(&f0, &f1, &mut Rng::new(0)), PreferenceLabel::One);
        let neg = AnnotatorProfile::new(1, [-1.0, 0.0, 0.0]);
        assert_eq!(neg.label(&f0, &f1, &mut Rng::new(0)), PreferenceLabel::Zero);
        a.inconsistency = 1.0;
        assert_eq!(a.label(&f0, &f1, &mut Rng::new(0)), PreferenceLabel::Zero);
        a.tie_margin = 2.0;
        assert_eq!(a.label(&f0, &f1, &mut Rng::new(0)), PreferenceLabel::Tie);
    }

    #[test]
    fn validation() {
        let mut a = AnnotatorProfile::new(0, [1.0, 0.0, 0.0]);
        a.inconsistency = 1.5;
        assert!(a.validate().is_err());
    }
}
