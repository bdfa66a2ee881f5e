//! Mixture-of-experts multimodal transformer reward model.
//!
//! Pipeline for a batch of segments:
//!
//! 1. Modality embeddings plus one learned positional table shared by both
//!    streams.
//! 2. A shared causal self-attention stack (GPT-2 style, pre-norm) applied to
//!    the state stream and to the action stream with the same weights.
//! 3. A trajectory-level context `c = LayerNorm(W_c · mean_t(x̃S_t + x̃A_t))`
//!    and a two-layer router `g = softmax(W2 relu(W1 c + b1) + b2)`.
//! 4. `K` experts, each a pair of causal cross-attention pathways (states
//!    attend to actions and actions attend to states) with residual and
//!    feed-forward, followed by a linear reward head on `[zS_t ; zA_t]`.
//! 5. Per-step mixture `r_t = Σ_k g_k r^k_t` and score `ρ = Σ_k g_k ρ^k`.
//!
//! Routing is computed once per segment from the pooled context, so the
//! mixed reward at step `t` depends on the whole segment through `g`, while
//! every per-expert reward `r^k_t` depends only on steps `1..=t`.

use numcore::{Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{causal_attention, FeedForward, Linear, Norm, SelfBlock};
use super::{PrefixRewards, RewardModel, ScoreVars};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::segment::{Segment, SegmentBatch};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Length of the positional table; the longest segment accepted.
    pub max_len: usize,
    /// Shared model width `d`.
    pub width: usize,
    /// Context / router hidden width `d_r`.
    pub routing_dim: usize,
    /// Number of experts `K`.
    pub experts: usize,
    pub heads: usize,
    pub intra_layers: usize,
    /// Feed-forward hidden width as a multiple of `width`.
    pub ffn_mult: usize,
    /// Squash per-step expert rewards with `tanh`.
    pub tanh_head: bool,
}

impl ModelConfig {
    /// Reported architecture: `K = 4`, `d_r = 128`.
    pub fn reference(state_dim: usize, action_dim: usize, max_len: usize) -> Self {
        ModelConfig {
            state_dim,
            action_dim,
            max_len,
            width: 128,
            routing_dim: 128,
            experts: 4,
            heads: 4,
            intra_layers: 1,
            ffn_mult: 4,
            tanh_head: false,
        }
    }

    /// Small configuration that trains in seconds on one core.
    pub fn desk(state_dim: usize, action_dim: usize, max_len: usize, experts: usize) -> Self {
        ModelConfig {
            state_dim,
            action_dim,
            max_len,
            width: 16,
            routing_dim: 16,
            experts,
            heads: 4,
            intra_layers: 1,
            ffn_mult: 2,
            tanh_head: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.experts == 0 {
            return bad("experts must be >= 1".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.width < 2 {
            return bad("width must be >= 2".into());
        }
        if self.routing_dim < 2 {
            // the context layer norm needs at least two features
            return bad("routing_dim must be >= 2".into());
        }
        if self.max_len == 0 || self.state_dim == 0 || self.action_dim == 0 || self.ffn_mult == 0 {
            return bad("max_len, state_dim, action_dim and ffn_mult must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Expert {
    ln_s: Norm,
    ln_a: Norm,
    q_s: Linear,
    k_s: Linear,
    v_s: Linear,
    q_a: Linear,
    k_a: Linear,
    v_a: Linear,
    o_s: Linear,
    o_a: Linear,
    ln_ff: Norm,
    ffn: FeedForward,
    head: Linear,
}

impl Expert {
    fn new(store: &mut ParamStore, k: usize, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.width;
        let n = |s: &str| format!("expert.{k}.{s}");
        Expert {
            ln_s: Norm::new(store, &n("ln_s"), d),
            ln_a: Norm::new(store, &n("ln_a"), d),
            q_s: Linear::new(store, &n("q_s"), d, d, true, rng),
            k_s: Linear::new(store, &n("k_s"), d, d, true, rng),
            v_s: Linear::new(store, &n("v_s"), d, d, true, rng),
            q_a: Linear::new(store, &n("q_a"), d, d, true, rng),
            k_a: Linear::new(store, &n("k_a"), d, d, true, rng),
            v_a: Linear::new(store, &n("v_a"), d, d, true, rng),
            o_s: Linear::new(store, &n("o_s"), d, d, true, rng),
            o_a: Linear::new(store, &n("o_a"), d, d, true, rng),
            ln_ff: Norm::new(store, &n("ln_ff"), d),
            ffn: FeedForward::new(store, &n("ffn"), d, d * cfg.ffn_mult, rng),
            head: Linear::new(store, &n("head"), 2 * d, 1, true, rng),
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    embed_s: Linear,
    embed_a: Linear,
    pos: ParamId,
    blocks: Vec<SelfBlock>,
    ln_f: Norm,
    ctx: Linear,
    ctx_norm: Norm,
    router_hidden: Linear,
    router_out: Linear,
    experts: Vec<Expert>,
}

impl Layout {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &Rng) -> Self {
        let d = cfg.width;
        let mut r = rng.fork("embed");
        let embed_s = Linear::new(store, "embed.state", cfg.state_dim, d, true, &mut r);
        let embed_a = Linear::new(store, "embed.action", cfg.action_dim, d, true, &mut r);
        let pos = store.add(
            "embed.pos",
            Tensor::randn([cfg.max_len, d], 1.0 / (d as f64).sqrt(), &mut r),
        );
        let mut r = rng.fork("intra");
        let blocks = (0..cfg.intra_layers)
            .map(|l| SelfBlock::new(store, &format!("intra.{l}"), d, d * cfg.ffn_mult, &mut r))
            .collect();
        let ln_f = Norm::new(store, "intra.ln_f", d);
        let mut r = rng.fork("router");
        let ctx = Linear::new(store, "router.ctx", d, cfg.routing_dim, false, &mut r);
        let ctx_norm = Norm::new(store, "router.ctx_norm", cfg.routing_dim);
        let router_hidden = Linear::new(
            store,
            "router.hidden",
            cfg.routing_dim,
            cfg.routing_dim,
            true,
            &mut r,
        );
        // zero output layer: routing starts uniform
        let router_out = Linear::zeros(store, "router.out", cfg.routing_dim, cfg.experts);
        let experts = (0..cfg.experts)
            .map(|k| Expert::new(store, k, cfg, &mut rng.fork(&format!("expert.{k}"))))
            .collect();
        Layout {
            embed_s,
            embed_a,
            pos,
            blocks,
            ln_f,
            ctx,
            ctx_norm,
            router_hidden,
            router_out,
            experts,
        }
    }
}

/// Tape handles of every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Embedded streams `[B, T, d]`.
    pub embed_s: Var,
    pub embed_a: Var,
    /// Intra-modal encodings `[B, T, d]`.
    pub intra_s: Var,
    pub intra_a: Var,
    /// Context vectors `[B, d_r]`.
    pub context: Var,
    /// Routing weights `[B, K]`.
    pub routing: Var,
    /// Per-expert per-step rewards `[B, T, K]`.
    pub expert_rewards: Var,
    /// Per-expert segment scores `[B, K]`.
    pub expert_scores: Var,
    /// Mixed per-step rewards `[B, T]`.
    pub rewards: Var,
    /// Mixed segment scores `[B]`.
    pub score: Var,
}

/// Plain-value result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardOutput {
    /// `[B, T]`
    pub rewards: Tensor,
    /// `[B, K, T]`
    pub expert_rewards: Tensor,
    /// `[B, K]`
    pub routing: Tensor,
    /// `[B, K]`
    pub expert_scores: Tensor,
    /// `[B]`
    pub score: Tensor,
}

#[derive(Clone, Debug)]
pub struct PrefMoe {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl PrefMoe {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, &Rng::new(seed));
        Ok(PrefMoe {
            config,
            params,
            layout,
        })
    }

    /// Wraps existing parameter values; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamStore::new();
        let layout = Layout::build(&config, &mut expected, &Rng::new(0));
        if !expected.same_layout(&params) {
            return Err(Error::Data(
                "parameter layout does not match model config".into(),
            ));
        }
        Ok(PrefMoe {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    fn check_batch(&self, batch: &SegmentBatch) -> Result<()> {
        if batch.state_dim() != self.config.state_dim
            || batch.action_dim() != self.config.action_dim
        {
            return Err(Error::Input(format!(
                "batch dims ({}, {}) do not match model ({}, {})",
                batch.state_dim(),
                batch.action_dim(),
                self.config.state_dim,
                self.config.action_dim
            )));
        }
        if batch.seq_len() > self.config.max_len {
            return Err(Error::Input(format!(
                "segment length {} exceeds positional table length {}",
                batch.seq_len(),
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// `x^S = f^S(s) + E_{1:T}`, `x^A = f^A(a) + E_{1:T}` with one shared table `E`.
    pub fn embed_streams(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &SegmentBatch,
    ) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        let l = &self.layout;
        let s = tape.constant(batch.states.clone())?;
        let a = tape.constant(batch.actions.clone())?;
        let pos = tape.narrow0(p.var(l.pos), 0, batch.seq_len())?;
        let xs = l.embed_s.apply(tape, p, s)?;
        let xs = tape.add(xs, pos)?;
        let xa = l.embed_a.apply(tape, p, a)?;
        let xa = tape.add(xa, pos)?;
        Ok((xs, xa))
    }

    /// Shared causal self-attention stack on one stream `[B, T, d]`.
    pub fn intra_encode(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.layout.blocks {
            h = block.apply(tape, p, h, self.config.heads)?;
        }
        self.layout.ln_f.apply(tape, p, h)
    }

    /// Both streams through the same encoder in one pass.
    fn intra_encode_pair(
        &self,
        tape: &mut Tape,
        p: &Bound,
        xs: Var,
        xa: Var,
    ) -> Result<(Var, Var)> {
        let b = tape.shape(xs)[0];
        let both = tape.concat0(&[xs, xa])?;
        let enc = self.intra_encode(tape, p, both)?;
        Ok((tape.narrow0(enc, 0, b)?, tape.narrow0(enc, b, b)?))
    }

    /// `c = LayerNorm(W_c · mean_t(x̃S_t + x̃A_t))`, `[B, d_r]`.
    pub fn pool_context(&self, tape: &mut Tape, p: &Bound, xs: Var, xa: Var) -> Result<Var> {
        let sum = tape.add(xs, xa)?;
        let mean = tape.mean_axis(sum, 1)?;
        self.context_from_mean(tape, p, mean)
    }

    /// `LayerNorm(W_c · m)` for already pooled `m [B, d]`.
    pub fn context_from_mean(&self, tape: &mut Tape, p: &Bound, mean: Var) -> Result<Var> {
        let l = &self.layout;
        let proj = l.ctx.apply(tape, p, mean)?;
        l.ctx_norm.apply(tape, p, proj)
    }

    /// `g = softmax(W2 relu(W1 c + b1) + b2)`, `[B, K]`.
    pub fn route(&self, tape: &mut Tape, p: &Bound, c: Var) -> Result<Var> {
        let l = &self.layout;
        let h = l.router_hidden.apply(tape, p, c)?;
        let h = tape.relu(h)?;
        let logits = l.router_out.apply(tape, p, h)?;
        Ok(tape.softmax(logits)?)
    }

    /// Raw causal cross-attention of expert `k`: states query actions and
    /// actions query states. Returns the two attention outputs before the
    /// output projection, `[B, T, d]` each.
    pub fn cross_attention_core(
        &self,
        tape: &mut Tape,
        p: &Bound,
        xs: Var,
        xa: Var,
        k: usize,
    ) -> Result<(Var, Var)> {
        let e = self.expert(k)?;
        let sn = e.ln_s.apply(tape, p, xs)?;
        let an = e.ln_a.apply(tape, p, xa)?;
        let q_s = e.q_s.apply(tape, p, sn)?;
        let k_s = e.k_s.apply(tape, p, sn)?;
        let v_s = e.v_s.apply(tape, p, sn)?;
        let q_a = e.q_a.apply(tape, p, an)?;
        let k_a = e.k_a.apply(tape, p, an)?;
        let v_a = e.v_a.apply(tape, p, an)?;
        let heads = self.config.heads;
        let zs = causal_attention(tape, q_s, k_a, v_a, heads)?;
        let za = causal_attention(tape, q_a, k_s, v_s, heads)?;
        Ok((zs, za))
    }

    /// Value projections `V^{A,k}` and `V^{S,k}` used by [`cross_attention_core`](Self::cross_attention_core).
    pub fn cross_values(
        &self,
        tape: &mut Tape,
        p: &Bound,
        xs: Var,
        xa: Var,
        k: usize,
    ) -> Result<(Var, Var)> {
        let e = self.expert(k)?;
        let an = e.ln_a.apply(tape, p, xa)?;
        let sn = e.ln_s.apply(tape, p, xs)?;
        Ok((e.v_a.apply(tape, p, an)?, e.v_s.apply(tape, p, sn)?))
    }

    /// Expert `k`'s inter-modal block: cross-attention with residual, then a
    /// shared feed-forward on both pathways. Returns `(z^{S,k}, z^{A,k})`.
    pub fn expert_cross_attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        xs: Var,
        xa: Var,
        k: usize,
    ) -> Result<(Var, Var)> {
        let (zs, za) = self.cross_attention_core(tape, p, xs, xa, k)?;
        let e = &self.layout.experts[k];
        let zs = e.o_s.apply(tape, p, zs)?;
        let za = e.o_a.apply(tape, p, za)?;
        let hs = tape.add(xs, zs)?;
        let ha = tape.add(xa, za)?;
        let b = tape.shape(hs)[0];
        let both = tape.concat0(&[hs, ha])?;
        let n = e.ln_ff.apply(tape, p, both)?;
        let f = e.ffn.apply(tape, p, n)?;
        let out = tape.add(both, f)?;
        Ok((tape.narrow0(out, 0, b)?, tape.narrow0(out, b, b)?))
    }

    /// Per-step reward `[B, T, 1]` from `[z^S_t ; z^A_t]` through a linear map
    /// (optionally squashed by `tanh`).
    pub fn expert_reward_head(
        &self,
        tape: &mut Tape,
        p: &Bound,
        zs: Var,
        za: Var,
        k: usize,
    ) -> Result<Var> {
        let e = self.expert(k)?;
        let z = tape.concat_last(&[zs, za])?;
        let r = e.head.apply(tape, p, z)?;
        Ok(if self.config.tanh_head {
            tape.tanh(r)?
        } else {
            r
        })
    }

    fn expert(&self, k: usize) -> Result<&Expert> {
        self.layout.experts.get(k).ok_or_else(|| {
            Error::Input(format!(
                "expert index {k} out of range for K = {}",
                self.config.experts
            ))
        })
    }

    /// Full forward pass on the tape.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &SegmentBatch,
    ) -> Result<ForwardVars> {
        let (b, t, k) = (batch.len(), batch.seq_len(), self.config.experts);
        let (embed_s, embed_a) = self.embed_streams(tape, p, batch)?;
        let (intra_s, intra_a) = self.intra_encode_pair(tape, p, embed_s, embed_a)?;
        let context = self.pool_context(tape, p, intra_s, intra_a)?;
        let routing = self.route(tape, p, context)?;
        let mut per_expert = Vec::with_capacity(k);
        for e in 0..k {
            let (zs, za) = self.expert_cross_attention(tape, p, intra_s, intra_a, e)?;
            per_expert.push(self.expert_reward_head(tape, p, zs, za, e)?);
        }
        let expert_rewards = tape.concat_last(&per_expert)?;
        let expert_scores = segment_score(tape, expert_rewards)?;
        let g_col = tape.reshape(routing, &[b, k, 1])?;
        let mixed = tape.bmm(expert_rewards, g_col, false)?;
        let rewards = tape.reshape(mixed, &[b, t])?;
        let weighted = tape.mul(expert_scores, routing)?;
        let score = tape.sum_axis(weighted, 1)?;
        Ok(ForwardVars {
            embed_s,
            embed_a,
            intra_s,
            intra_a,
            context,
            routing,
            expert_rewards,
            expert_scores,
            rewards,
            score,
        })
    }

    pub fn forward(&self, batch: &SegmentBatch) -> Result<RewardOutput> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let v = self.forward_tape(&mut tape, &p, batch)?;
        Ok(self.output(&tape, &v))
    }

    /// Extracts plain tensors from a recorded forward pass.
    pub fn output(&self, tape: &Tape, v: &ForwardVars) -> RewardOutput {
        let er = tape.value(v.expert_rewards);
        let (b, t, k) = (er.shape()[0], er.shape()[1], er.shape()[2]);
        let mut bkt = Tensor::zeros([b, k, t]);
        for bi in 0..b {
            for ti in 0..t {
                for ki in 0..k {
                    bkt.set(&[bi, ki, ti], er.at(&[bi, ti, ki]));
                }
            }
        }
        RewardOutput {
            rewards: tape.value(v.rewards).clone(),
            expert_rewards: bkt,
            routing: tape.value(v.routing).clone(),
            expert_scores: tape.value(v.expert_scores).clone(),
            score: tape.value(v.score).clone(),
        }
    }

    /// Single inter-modal encoder without any router: backbone, expert `k`,
    /// reward head. Returns `(rewards [B, T], scores [B])`.
    pub fn single_encoder_forward(
        &self,
        batch: &SegmentBatch,
        k: usize,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let (xs, xa) = self.embed_streams(&mut tape, &p, batch)?;
        let (hs, ha) = self.intra_encode_pair(&mut tape, &p, xs, xa)?;
        let (zs, za) = self.expert_cross_attention(&mut tape, &p, hs, ha, k)?;
        let r = self.expert_reward_head(&mut tape, &p, zs, za, k)?;
        let r = tape.reshape(r, &[batch.len(), batch.seq_len()])?;
        let score = tape.sum_axis(r, 1)?;
        Ok((tape.value(r).clone(), tape.value(score).clone()))
    }

    /// Names of the parameters owned by expert `k`.
    pub fn expert_param_names(&self, k: usize) -> Vec<String> {
        let prefix = format!("expert.{k}.");
        self.params
            .iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.name.clone())
            .collect()
    }
}

/// `ρ = Σ_t r_t` over axis 1 of `[B, T, ..]`.
pub fn segment_score(tape: &mut Tape, rewards: Var) -> Result<Var> {
    Ok(tape.sum_axis(rewards, 1)?)
}

impl RewardModel for PrefMoe {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn experts(&self) -> usize {
        self.config.experts
    }

    fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn score_tape(&self, tape: &mut Tape, p: &Bound, batch: &SegmentBatch) -> Result<ScoreVars> {
        let v = self.forward_tape(tape, p, batch)?;
        Ok(ScoreVars {
            rewards: v.rewards,
            score: v.score,
            routing: Some(v.routing),
        })
    }

    /// One pass over the whole segment. Per-expert rewards and intra-modal
    /// encodings at step `t` only see steps `1..=t`, so the length-`t` prefix
    /// shares them with the full pass; its routing comes from the running mean
    /// of `x̃S + x̃A` over the first `t` steps.
    fn prefix_rewards(&self, segment: &Segment) -> Result<PrefixRewards> {
        let batch = SegmentBatch::stack([segment])?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let v = self.forward_tape(&mut tape, &p, &batch)?;
        let (len, d, k) = (segment.len(), self.config.width, self.config.experts);
        let xs = tape.value(v.intra_s).data().to_vec();
        let xa = tape.value(v.intra_a).data().to_vec();
        let mut running = vec![0.0; d];
        let mut means = Vec::with_capacity(len * d);
        for t in 0..len {
            for j in 0..d {
                running[j] += xs[t * d + j] + xa[t * d + j];
            }
            let n = (t + 1) as f64;
            means.extend(running.iter().map(|s| s / n));
        }
        let m = tape.constant(Tensor::new([len, d], means)?)?;
        let c = self.context_from_mean(&mut tape, &p, m)?;
        let g = self.route(&mut tape, &p, c)?;
        let g = tape.value(g).clone();
        let er = tape.value(v.expert_rewards).data();
        let rewards = (0..len)
            .map(|t| (0..k).map(|j| er[t * k + j] * g.data()[t * k + j]).sum())
            .collect();
        Ok(PrefixRewards {
            rewards,
            routing: Some(g),
        })
    }
}
