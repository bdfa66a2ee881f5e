use numcore::{Tape, Tensor};
use prefmoe::datagen::{generate, GenConfig, RosterSpec, Split, SyntheticTaskConfig, GOAL};
use prefmoe::eval::{evaluate, is_correct, TIE_TOLERANCE};
use prefmoe::model::{ModelConfig, PrefMoe, RewardModel, ScoreVars};
use prefmoe::objective::PreferenceLabel;
use prefmoe::params::{Bound, ParamStore};
use prefmoe::segment::SegmentBatch;
use prefmoe::Result;

/// Scores steps with the annotator's own utility over the task features.
struct TrueUtility {
    task: SyntheticTaskConfig,
    weights: [f64; 3],
    params: ParamStore,
}

impl RewardModel for TrueUtility {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn experts(&self) -> usize {
        1
    }
    fn state_dim(&self) -> usize {
        self.task.state_dim()
    }
    fn action_dim(&self) -> usize {
        self.task.action_dim()
    }
    fn max_len(&self) -> usize {
        self.task.seq_len
    }
    fn score_tape(&self, tape: &mut Tape, _: &Bound, batch: &SegmentBatch) -> Result<ScoreVars> {
        let mut r = Vec::new();
        for b in 0..batch.len() {
            let seg = batch.segment(b);
            for t in 0..seg.len() {
                let f = self.task.features(seg.state(t), seg.action(t));
                r.push(f.iter().zip(&self.weights).map(|(x, w)| x * w).sum());
            }
        }
        let rewards = tape.constant(Tensor::new([batch.len(), batch.seq_len()], r)?)?;
        let score = tape.sum_axis(rewards, 1)?;
        Ok(ScoreVars {
            rewards,
            score,
            routing: None,
        })
    }
}

fn single_pool(noise: f64, margin: f64) -> prefmoe::datagen::Dataset {
    let roster = RosterSpec::Single {
        direction: GOAL,
        tie_margin: margin,
        inconsistency: noise,
    };
    let cfg = GenConfig {
        segments: 80,
        flip_rate: 0.2,
        ..GenConfig::desk(roster, 400, 5)
    };
    generate(&cfg, 3).unwrap()
}

#[test]
fn annotator_utility_scores_perfectly_on_clean_labels() {
    let d = single_pool(0.0, 0.0);
    let m = TrueUtility {
        task: d.manifest.config.task.clone(),
        weights: d.manifest.roster[0].weights,
        params: ParamStore::new(),
    };
    let clean = evaluate(&m, &d.clean_pairs(Split::Validation), TIE_TOLERANCE).unwrap();
    assert_eq!(clean.accuracy, 1.0);
    assert!(clean.usage.is_none());
    let noisy = evaluate(&m, &d.pairs(Split::Validation), TIE_TOLERANCE).unwrap();
    assert!(noisy.accuracy < 1.0);
}

#[test]
fn constant_model_scores_the_base_rate() {
    let d = single_pool(0.1, 0.3);
    let task = &d.manifest.config.task;
    let mut m = PrefMoe::new(
        ModelConfig::desk(task.state_dim(), task.action_dim(), task.seq_len, 2),
        1,
    )
    .unwrap();
    for p in m.params_mut().iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let pairs = d.clean_pairs(Split::Validation);
    let got = evaluate(&m, &pairs, TIE_TOLERANCE).unwrap();
    let base = pairs
        .iter()
        .filter(|p| p.label != PreferenceLabel::One)
        .count() as f64
        / pairs.len() as f64;
    assert!(pairs.iter().any(|p| p.label.is_tie()));
    assert_eq!(got.accuracy, base);
    assert!((got.bt_loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(got.usage, Some(vec![0.5, 0.5]));
    assert_eq!(got.max_usage, Some(0.5));
    assert!(evaluate(&m, &[], TIE_TOLERANCE).is_err());
}

#[test]
fn decision_rule_cases() {
    use PreferenceLabel::*;
    assert!(is_correct(0.5, Zero, 0.1));
    assert!(!is_correct(0.5, One, 0.1));
    assert!(is_correct(0.5 + 1e-12, One, 0.1));
    assert!(is_correct(0.59, Tie, 0.1));
    assert!(!is_correct(0.61, Tie, 0.1));
    assert!(!is_correct(0.39, Tie, 0.1));
    assert!(is_correct(0.41, Zero, 0.1));
}
