//! Sliding-window reward relabeling of transition buffers.
//!
//! Transition `t` of an episode is scored by the window of the most recent
//! `min(t, H)` transitions ending at `t` (stride 1): the model runs on that
//! window as a segment of its own, routing once for the window, and the
//! reward at the window's last position is emitted. Early transitions use the
//! shorter prefix that exists rather than padding.
//!
//! Buffer file, one JSON object per line:
//!
//! ```text
//! {"buffer": {"format_version": 1, "state_dim": 6, "action_dim": 2, "window": null}}
//! {"episode": {"states": {...}, "actions": {...}, "rewards": null}}
//! ```
//!
//! A relabeled buffer records the window length in the header and a
//! per-transition `rewards` column on every episode.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RewardModel;
use crate::segment::{Segment, SegmentBatch};

pub const BUFFER_VERSION: u32 = 1;

/// Episodes with explicit boundaries; windows never cross them.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBuffer {
    pub episodes: Vec<Segment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelConfig {
    /// Window length `H`.
    pub window: usize,
}

impl RelabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window length must be >= 1".into()));
        }
        Ok(())
    }
}

impl TransitionBuffer {
    pub fn new(episodes: Vec<Segment>) -> Result<Self> {
        let b = TransitionBuffer { episodes };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.episodes.first() else {
            return Err(Error::Data("buffer has no episodes".into()));
        };
        for (i, e) in self.episodes.iter().enumerate() {
            if e.is_empty() {
                return Err(Error::Data(format!("episode {i} is empty")));
            }
            if e.state_dim() != first.state_dim() || e.action_dim() != first.action_dim() {
                return Err(Error::Data(format!(
                    "episode {i} dims differ from episode 0"
                )));
            }
        }
        Ok(())
    }

    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(Segment::len).sum()
    }
}

fn check<M: RewardModel + ?Sized>(
    model: &M,
    buffer: &TransitionBuffer,
    cfg: &RelabelConfig,
) -> Result<()> {
    cfg.validate()?;
    buffer.validate()?;
    let e = &buffer.episodes[0];
    if e.state_dim() != model.state_dim() || e.action_dim() != model.action_dim() {
        return Err(Error::Input("buffer dims do not match the model".into()));
    }
    if cfg.window > model.max_len() {
        return Err(Error::Config(format!(
            "window {} exceeds the model's maximum segment length {}",
            cfg.window,
            model.max_len()
        )));
    }
    Ok(())
}

/// Per-transition rewards and per-window routing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Relabeled {
    pub rewards: Vec<Vec<f64>>,
    /// `routing[e][t]` is the routing vector of the window ending at `t`.
    pub routing: Option<Vec<Vec<Vec<f64>>>>,
}

const CHUNK: usize = 256;

/// Windows shorter than `H` come from one prefix pass per episode; all
/// full-length windows are batched together.
pub fn relabel_with_routing<M: RewardModel + ?Sized>(
    model: &M,
    buffer: &TransitionBuffer,
    cfg: &RelabelConfig,
) -> Result<Relabeled> {
    check(model, buffer, cfg)?;
    let h = cfg.window;
    let k = model.experts();
    let mut rewards: Vec<Vec<f64>> = Vec::with_capacity(buffer.episodes.len());
    let mut routing: Vec<Vec<Vec<f64>>> = Vec::with_capacity(buffer.episodes.len());
    let mut has_routing = false;
    // (episode, end index) of every full window beyond the first
    let mut full: Vec<(usize, usize)> = Vec::new();
    for (ei, ep) in buffer.episodes.iter().enumerate() {
        let head = ep.len().min(h);
        let pre = model.prefix_rewards(&ep.window(0, head))?;
        let mut r = pre.rewards;
        let mut g: Vec<Vec<f64>> = match &pre.routing {
            Some(t) => {
                has_routing = true;
                t.data().chunks(k).map(<[f64]>::to_vec).collect()
            }
            None => Vec::new(),
        };
        r.resize(ep.len(), 0.0);
        if has_routing {
            g.resize(ep.len(), Vec::new());
        }
        full.extend((h..ep.len()).map(|t| (ei, t)));
        rewards.push(r);
        routing.push(g);
    }
    for part in full.chunks(CHUNK) {
        let windows: Vec<Segment> = part
            .iter()
            .map(|&(e, t)| buffer.episodes[e].window(t + 1 - h, h))
            .collect();
        let out = model.evaluate(&SegmentBatch::stack(&windows)?)?;
        for (i, &(e, t)) in part.iter().enumerate() {
            rewards[e][t] = out.rewards.data()[i * h + h - 1];
            if let Some(g) = &out.routing {
                routing[e][t] = g.data()[i * k..(i + 1) * k].to_vec();
            }
        }
    }
    Ok(Relabeled {
        rewards,
        routing: has_routing.then_some(routing),
    })
}

pub fn relabel<M: RewardModel + ?Sized>(
    model: &M,
    buffer: &TransitionBuffer,
    cfg: &RelabelConfig,
) -> Result<Vec<Vec<f64>>> {
    Ok(relabel_with_routing(model, buffer, cfg)?.rewards)
}

/// Routing weights of every evaluated window, one row per transition.
pub fn window_routing_trace<M: RewardModel + ?Sized>(
    model: &M,
    buffer: &TransitionBuffer,
    cfg: &RelabelConfig,
) -> Result<Vec<Vec<Vec<f64>>>> {
    relabel_with_routing(model, buffer, cfg)?
        .routing
        .ok_or_else(|| Error::Input("model has no router".into()))
}

/// Reference relabeling: one independent forward pass per window.
pub fn relabel_naive<M: RewardModel + ?Sized>(
    model: &M,
    buffer: &TransitionBuffer,
    cfg: &RelabelConfig,
) -> Result<Vec<Vec<f64>>> {
    check(model, buffer, cfg)?;
    let h = cfg.window;
    buffer
        .episodes
        .iter()
        .map(|ep| {
            (0..ep.len())
                .map(|t| {
                    let len = (t + 1).min(h);
                    let w = ep.window(t + 1 - len, len);
                    let out = model.evaluate(&SegmentBatch::stack([&w])?)?;
                    Ok(out.rewards.data()[len - 1])
                })
                .collect()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct BufferHeader {
    format_version: u32,
    state_dim: usize,
    action_dim: usize,
    window: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeLine {
    #[serde(flatten)]
    segment: Segment,
    rewards: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BufferLine {
    Buffer(BufferHeader),
    Episode(EpisodeLine),
}

fn write_lines(
    buffer: &TransitionBuffer,
    window: Option<usize>,
    rewards: Option<&[Vec<f64>]>,
) -> Result<String> {
    buffer.validate()?;
    let e0 = &buffer.episodes[0];
    let mut out = serde_json::to_string(&BufferLine::Buffer(BufferHeader {
        format_version: BUFFER_VERSION,
        state_dim: e0.state_dim(),
        action_dim: e0.action_dim(),
        window,
    }))?;
    out.push('\n');
    for (i, e) in buffer.episodes.iter().enumerate() {
        let line = BufferLine::Episode(EpisodeLine {
            segment: e.clone(),
            rewards: rewards.map(|r| r[i].clone()),
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

/// A buffer file's contents: the episodes, and the window and reward
/// column if it has been relabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferFile {
    pub buffer: TransitionBuffer,
    pub window: Option<usize>,
    pub rewards: Option<Vec<Vec<f64>>>,
}

impl BufferFile {
    pub fn to_jsonl(&self) -> Result<String> {
        write_lines(&self.buffer, self.window, self.rewards.as_deref())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut episodes = Vec::new();
        let mut rewards = Vec::new();
        for (n, raw) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let line: BufferLine = serde_json::from_str(raw)
                .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
            match line {
                BufferLine::Buffer(h) if header.is_none() && episodes.is_empty() => {
                    header = Some(h)
                }
                BufferLine::Buffer(_) => {
                    return Err(Error::Data(format!("line {}: unexpected header", n + 1)))
                }
                BufferLine::Episode(e) => {
                    let seg = Segment::new(e.segment.states, e.segment.actions)
                        .map_err(|err| Error::Data(format!("line {}: {err}", n + 1)))?;
                    if let Some(r) = &e.rewards {
                        if r.len() != seg.len() {
                            return Err(Error::Data(format!(
                                "line {}: reward column length mismatch",
                                n + 1
                            )));
                        }
                    }
                    rewards.push(e.rewards);
                    episodes.push(seg);
                }
            }
        }
        let header = header.ok_or_else(|| Error::Data("missing buffer header".into()))?;
        if header.format_version != BUFFER_VERSION {
            return Err(Error::Data(format!(
                "unsupported buffer version {}",
                header.format_version
            )));
        }
        let buffer = TransitionBuffer::new(episodes)?;
        if buffer.episodes[0].state_dim() != header.state_dim
            || buffer.episodes[0].action_dim() != header.action_dim
        {
            return Err(Error::Data("episode dims do not match the header".into()));
        }
        let rewards = if rewards.iter().all(Option::is_some) {
            Some(rewards.into_iter().map(Option::unwrap).collect())
        } else if rewards.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::Data(
                "reward column present on some episodes only".into(),
            ));
        };
        Ok(BufferFile {
            buffer,
            window: header.window,
            rewards,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}
