//! Trajectory segments and stacked batches of them.

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time-aligned state and action streams of one trajectory piece.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// `[T, d_s]`
    pub states: Tensor,
    /// `[T, d_a]`
    pub actions: Tensor,
}

impl Segment {
    pub fn new(states: Tensor, actions: Tensor) -> Result<Self> {
        if states.rank() != 2 || actions.rank() != 2 || states.shape()[0] != actions.shape()[0] {
            return Err(Error::Input(format!(
                "segment streams not aligned: states {:?}, actions {:?}",
                states.shape(),
                actions.shape()
            )));
        }
        if states.shape()[0] == 0 {
            return Err(Error::Input("empty segment".into()));
        }
        Ok(Segment { states, actions })
    }

    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn action_dim(&self) -> usize {
        self.actions.shape()[1]
    }

    pub fn state(&self, t: usize) -> &[f64] {
        let d = self.state_dim();
        &self.states.data()[t * d..(t + 1) * d]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        let d = self.action_dim();
        &self.actions.data()[t * d..(t + 1) * d]
    }

    /// Steps `start..start + len` as a new segment.
    pub fn window(&self, start: usize, len: usize) -> Segment {
        let (ds, da) = (self.state_dim(), self.action_dim());
        let s = self.states.data()[start * ds..(start + len) * ds].to_vec();
        let a = self.actions.data()[start * da..(start + len) * da].to_vec();
        Segment {
            states: Tensor::new([len, ds], s).expect("window states"),
            actions: Tensor::new([len, da], a).expect("window actions"),
        }
    }
}

/// `B` segments of equal length stacked along a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    /// `[B, T, d_s]`
    pub states: Tensor,
    /// `[B, T, d_a]`
    pub actions: Tensor,
}

impl SegmentBatch {
    pub fn new(states: Tensor, actions: Tensor) -> Result<Self> {
        let (s, a) = (states.shape(), actions.shape());
        if s.len() != 3 || a.len() != 3 || s[0] != a[0] || s[1] != a[1] || s[0] == 0 || s[1] == 0 {
            return Err(Error::Input(format!(
                "batch streams not aligned: states {s:?}, actions {a:?}"
            )));
        }
        Ok(SegmentBatch { states, actions })
    }

    pub fn stack<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> Result<Self> {
        let mut s = Vec::new();
        let mut a = Vec::new();
        let mut dims: Option<(usize, usize, usize)> = None;
        let mut n = 0;
        for seg in segments {
            let d = (seg.len(), seg.state_dim(), seg.action_dim());
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Input(format!(
                        "cannot stack segments of shapes {prev:?} and {d:?}"
                    )))
                }
                _ => {}
            }
            s.extend_from_slice(seg.states.data());
            a.extend_from_slice(seg.actions.data());
            n += 1;
        }
        let (t, ds, da) = dims.ok_or_else(|| Error::Input("empty batch".into()))?;
        SegmentBatch::new(Tensor::new([n, t, ds], s)?, Tensor::new([n, t, da], a)?)
    }

    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn state_dim(&self) -> usize {
        self.states.shape()[2]
    }

    pub fn action_dim(&self) -> usize {
        self.actions.shape()[2]
    }

    /// Segment `b` of the batch.
    pub fn segment(&self, b: usize) -> Segment {
        let (t, ds, da) = (self.seq_len(), self.state_dim(), self.action_dim());
        Segment {
            states: Tensor::new(
                [t, ds],
                self.states.data()[b * t * ds..(b + 1) * t * ds].to_vec(),
            )
            .unwrap(),
            actions: Tensor::new(
                [t, da],
                self.actions.data()[b * t * da..(b + 1) * t * da].to_vec(),
            )
            .unwrap(),
        }
    }
}
