//! Reward models: the mixture-of-experts transformer and the per-step MLP baseline.

pub mod checkpoint;
pub mod layers;
mod markov;
mod prefmoe;

pub use checkpoint::{AnyModel, Checkpoint, ModelSpec, CHECKPOINT_VERSION};
pub use markov::{MarkovConfig, MarkovReward};
pub use prefmoe::{segment_score, ForwardVars, ModelConfig, PrefMoe, RewardOutput};

use numcore::{Tape, Var};

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::segment::{Segment, SegmentBatch};

/// Tape handles a trainer needs from any reward model.
#[derive(Clone, Copy, Debug)]
pub struct ScoreVars {
    /// Per-step rewards `[B, T]`.
    pub rewards: Var,
    /// Segment scores `[B]`.
    pub score: Var,
    /// Routing weights `[B, K]`, absent for models without a router.
    pub routing: Option<Var>,
}

/// Common surface over reward models for training, evaluation and relabeling.
pub trait RewardModel {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn experts(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Longest segment the model accepts.
    fn max_len(&self) -> usize;
    fn score_tape(&self, tape: &mut Tape, p: &Bound, batch: &SegmentBatch) -> Result<ScoreVars>;

    /// Untracked per-step rewards, segment scores and routing weights.
    fn evaluate(&self, batch: &SegmentBatch) -> Result<Evaluation> {
        let mut tape = Tape::new();
        let p = self.params().bind(&mut tape, false)?;
        let v = self.score_tape(&mut tape, &p, batch)?;
        Ok(Evaluation {
            rewards: tape.value(v.rewards).clone(),
            score: tape.value(v.score).clone(),
            routing: v.routing.map(|g| tape.value(g).clone()),
        })
    }

    /// Reward at the final step of every prefix `σ_{1..t}`, `t = 1..=L`, each
    /// prefix scored as a segment of its own, with the prefix's routing.
    ///
    /// The default runs one forward pass per prefix length.
    fn prefix_rewards(&self, segment: &Segment) -> Result<PrefixRewards> {
        let len = segment.len();
        let mut rewards = Vec::with_capacity(len);
        let mut routing: Vec<f64> = Vec::new();
        for t in 1..=len {
            let out = self.evaluate(&SegmentBatch::stack([&segment.window(0, t)])?)?;
            rewards.push(out.rewards.data()[t - 1]);
            if let Some(g) = out.routing {
                routing.extend_from_slice(g.data());
            }
        }
        let routing = if routing.is_empty() {
            None
        } else {
            Some(numcore::Tensor::new([len, self.experts()], routing)?)
        };
        Ok(PrefixRewards { rewards, routing })
    }
}

/// Output of [`RewardModel::prefix_rewards`].
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixRewards {
    /// `rewards[t - 1]` is the last-step reward of the length-`t` prefix.
    pub rewards: Vec<f64>,
    /// `[L, K]` routing weights of each prefix.
    pub routing: Option<numcore::Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rewards: numcore::Tensor,
    pub score: numcore::Tensor,
    pub routing: Option<numcore::Tensor>,
}
