//! Held-out preference accuracy and cross-entropy.
//!
//! A pair is predicted as "σ¹ preferred" when `P[σ¹ ≻ σ⁰] > 0.5`. A tie label
//! counts as correct when `|P − 0.5| < tie_tolerance`; a strict preference
//! counts as correct when the prediction matches it. Exactly `P = 0.5`
//! therefore predicts σ⁰.

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledPair;
use crate::error::{Error, Result};
use crate::model::RewardModel;
use crate::objective::{bt_pair_loss, load_balance, PreferenceLabel};

pub const TIE_TOLERANCE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub pairs: usize,
    pub accuracy: f64,
    pub bt_loss: f64,
    /// Mean routing weight per expert over both segments of every pair.
    pub usage: Option<Vec<f64>>,
    pub max_usage: Option<f64>,
    pub load_balance: Option<f64>,
}

pub fn is_correct(p: f64, label: PreferenceLabel, tie_tolerance: f64) -> bool {
    match label {
        PreferenceLabel::Tie => (p - 0.5).abs() < tie_tolerance,
        PreferenceLabel::One => p > 0.5,
        PreferenceLabel::Zero => p <= 0.5,
    }
}

/// Scores `pairs` in chunks of `chunk` pairs per forward pass.
pub fn evaluate<M: RewardModel + ?Sized>(
    model: &M,
    pairs: &[LabeledPair],
    tie_tolerance: f64,
) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let chunk = 256;
    let k = model.experts();
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut routing = Vec::new();
    for part in pairs.chunks(chunk) {
        let batch = LabeledPair::batch(part)?.joined()?;
        let out = model.evaluate(&batch)?;
        let b = part.len();
        for (i, pair) in part.iter().enumerate() {
            let (r0, r1) = (out.score.data()[i], out.score.data()[b + i]);
            let p = crate::objective::bt_probability(r0, r1)?;
            correct += is_correct(p, pair.label, tie_tolerance) as usize;
            loss += bt_pair_loss(r0, r1, pair.label.value());
        }
        if let Some(g) = out.routing {
            routing.extend_from_slice(g.data());
        }
    }
    let n = pairs.len();
    let (usage, max_usage, bal) = if routing.is_empty() {
        (None, None, None)
    } else {
        let rows = routing.len() / k;
        let g = numcore::Tensor::new([rows, k], routing)?;
        let usage: Vec<f64> = (0..k)
            .map(|j| (0..rows).map(|r| g.data()[r * k + j]).sum::<f64>() / rows as f64)
            .collect();
        let max = usage.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (Some(usage), Some(max), Some(load_balance(&g)?))
    };
    Ok(EvalMetrics {
        pairs: n,
        accuracy: correct as f64 / n as f64,
        bt_loss: loss / n as f64,
        usage,
        max_usage,
        load_balance: bal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoring_rule() {
        assert!(is_correct(0.7, PreferenceLabel::One, 0.1));
        assert!(!is_correct(0.5, PreferenceLabel::One, 0.1));
        assert!(is_correct(0.5, PreferenceLabel::Zero, 0.1));
        assert!(is_correct(0.55, PreferenceLabel::Tie, 0.1));
        assert!(!is_correct(0.65, PreferenceLabel::Tie, 0.1));
    }
}
