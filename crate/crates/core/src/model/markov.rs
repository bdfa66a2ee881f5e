//! Markovian baseline: an MLP scores each `(s_t, a_t)` on its own.

use numcore::{Rng, Tape};
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::{PrefixRewards, RewardModel, ScoreVars};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::segment::{Segment, SegmentBatch};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkovConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    /// Number of hidden ReLU layers.
    pub layers: usize,
}

impl MarkovConfig {
    pub fn desk(state_dim: usize, action_dim: usize) -> Self {
        MarkovConfig {
            state_dim,
            action_dim,
            hidden: 32,
            layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("markov dims must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MarkovReward {
    config: MarkovConfig,
    params: ParamStore,
    hidden: Vec<Linear>,
    out: Linear,
}

fn build(cfg: &MarkovConfig, store: &mut ParamStore, rng: &mut Rng) -> (Vec<Linear>, Linear) {
    let mut fan_in = cfg.state_dim + cfg.action_dim;
    let mut hidden = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        hidden.push(Linear::new(
            store,
            &format!("mlp.{l}"),
            fan_in,
            cfg.hidden,
            true,
            rng,
        ));
        fan_in = cfg.hidden;
    }
    let out = Linear::new(store, "mlp.out", fan_in, 1, true, rng);
    (hidden, out)
}

impl MarkovReward {
    pub fn new(config: MarkovConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (hidden, out) = build(&config, &mut params, &mut Rng::new(seed).fork("markov"));
        Ok(MarkovReward {
            config,
            params,
            hidden,
            out,
        })
    }

    pub fn from_params(config: MarkovConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamStore::new();
        let (hidden, out) = build(&config, &mut expected, &mut Rng::new(0));
        if !expected.same_layout(&params) {
            return Err(Error::Data(
                "parameter layout does not match markov config".into(),
            ));
        }
        Ok(MarkovReward {
            config,
            params,
            hidden,
            out,
        })
    }

    pub fn config(&self) -> &MarkovConfig {
        &self.config
    }

    /// Per-step rewards `[B, T]`.
    pub fn markov_reward(&self, batch: &SegmentBatch) -> Result<numcore::Tensor> {
        Ok(self.evaluate(batch)?.rewards)
    }
}

impl RewardModel for MarkovReward {
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
        self.config.state_dim
    }

    fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    fn max_len(&self) -> usize {
        usize::MAX
    }

    fn score_tape(&self, tape: &mut Tape, p: &Bound, batch: &SegmentBatch) -> Result<ScoreVars> {
        if batch.state_dim() != self.config.state_dim
            || batch.action_dim() != self.config.action_dim
        {
            return Err(Error::Input("batch dims do not match markov model".into()));
        }
        let s = tape.constant(batch.states.clone())?;
        let a = tape.constant(batch.actions.clone())?;
        let mut h = tape.concat_last(&[s, a])?;
        for layer in &self.hidden {
            let z = layer.apply(tape, p, h)?;
            h = tape.relu(z)?;
        }
        let r = self.out.apply(tape, p, h)?;
        let rewards = tape.reshape(r, &[batch.len(), batch.seq_len()])?;
        let score = tape.sum_axis(rewards, 1)?;
        Ok(ScoreVars {
            rewards,
            score,
            routing: None,
        })
    }

    /// Per-step rewards do not depend on context, so one pass serves every prefix.
    fn prefix_rewards(&self, segment: &Segment) -> Result<PrefixRewards> {
        let out = self.evaluate(&SegmentBatch::stack([segment])?)?;
        Ok(PrefixRewards {
            rewards: out.rewards.into_data(),
            routing: None,
        })
    }
}
