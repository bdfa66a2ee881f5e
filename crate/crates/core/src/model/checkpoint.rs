//! JSON checkpoint container.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "model": { "kind": "prefmoe", "config": { ..ModelConfig.. } }
//!          | { "kind": "markov",  "config": { ..MarkovConfig.. } },
//!   "params": { "entries": [ { "name": "...", "value": { "shape": [..], "data": [..] } }, ... ] }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so save → load reproduces every bit.

use std::path::Path;

use numcore::Tape;
use serde::{Deserialize, Serialize};

use super::{
    MarkovConfig, MarkovReward, ModelConfig, PrefMoe, PrefixRewards, RewardModel, ScoreVars,
};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::segment::{Segment, SegmentBatch};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelSpec {
    Prefmoe(ModelConfig),
    Markov(MarkovConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelSpec,
    pub params: ParamStore,
}

/// Either reward model, dispatched at runtime.
#[derive(Clone, Debug)]
pub enum AnyModel {
    PrefMoe(PrefMoe),
    Markov(MarkovReward),
}

impl AnyModel {
    pub fn spec(&self) -> ModelSpec {
        match self {
            AnyModel::PrefMoe(m) => ModelSpec::Prefmoe(m.config().clone()),
            AnyModel::Markov(m) => ModelSpec::Markov(m.config().clone()),
        }
    }

    pub fn as_prefmoe(&self) -> Option<&PrefMoe> {
        match self {
            AnyModel::PrefMoe(m) => Some(m),
            AnyModel::Markov(_) => None,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: self.spec(),
            params: self.params().clone(),
        }
    }
}

impl Checkpoint {
    pub fn into_model(self) -> Result<AnyModel> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        if !self.params.all_finite() {
            return Err(Error::Data(
                "checkpoint contains non-finite parameters".into(),
            ));
        }
        Ok(match self.model {
            ModelSpec::Prefmoe(c) => AnyModel::PrefMoe(PrefMoe::from_params(c, self.params)?),
            ModelSpec::Markov(c) => AnyModel::Markov(MarkovReward::from_params(c, self.params)?),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

impl RewardModel for AnyModel {
    fn params(&self) -> &ParamStore {
        match self {
            AnyModel::PrefMoe(m) => m.params(),
            AnyModel::Markov(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::PrefMoe(m) => m.params_mut(),
            AnyModel::Markov(m) => m.params_mut(),
        }
    }

    fn experts(&self) -> usize {
        match self {
            AnyModel::PrefMoe(m) => m.experts(),
            AnyModel::Markov(m) => m.experts(),
        }
    }

    fn state_dim(&self) -> usize {
        match self {
            AnyModel::PrefMoe(m) => m.state_dim(),
            AnyModel::Markov(m) => m.state_dim(),
        }
    }

    fn action_dim(&self) -> usize {
        match self {
            AnyModel::PrefMoe(m) => m.action_dim(),
            AnyModel::Markov(m) => m.action_dim(),
        }
    }

    fn max_len(&self) -> usize {
        match self {
            AnyModel::PrefMoe(m) => m.max_len(),
            AnyModel::Markov(m) => m.max_len(),
        }
    }

    fn score_tape(&self, tape: &mut Tape, p: &Bound, batch: &SegmentBatch) -> Result<ScoreVars> {
        match self {
            AnyModel::PrefMoe(m) => m.score_tape(tape, p, batch),
            AnyModel::Markov(m) => m.score_tape(tape, p, batch),
        }
    }

    fn prefix_rewards(&self, segment: &Segment) -> Result<PrefixRewards> {
        match self {
            AnyModel::PrefMoe(m) => m.prefix_rewards(segment),
            AnyModel::Markov(m) => m.prefix_rewards(segment),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = AnyModel::PrefMoe(PrefMoe::new(ModelConfig::desk(6, 2, 8, 2), 3).unwrap());
        let ck = m.to_checkpoint();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(ck, back);
        let bits = |s: &ParamStore| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ck.params), bits(&back.params));
        assert!(back.into_model().is_ok());
    }

    #[test]
    fn version_and_layout_are_checked() {
        let m = AnyModel::Markov(MarkovReward::new(MarkovConfig::desk(3, 1), 1).unwrap());
        let mut ck = m.to_checkpoint();
        ck.format_version = 99;
        assert!(ck.clone().into_model().is_err());
        ck.format_version = CHECKPOINT_VERSION;
        ck.model = ModelSpec::Markov(MarkovConfig::desk(4, 1));
        assert!(ck.into_model().is_err());
    }
}
