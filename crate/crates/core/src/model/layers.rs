//! Building blocks recorded on a tape: linear maps, layer norms, masked
//! multi-head attention and the GPT-2 style pre-norm block.

use numcore::{Rng, Tape, Tensor, Var};

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};

/// Layer-norm epsilon; constant slices map to the bias.
pub const LN_EPS: f64 = 1e-5;

/// Additive stand-in for `-inf` in the causal mask.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add_weight(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([fan_out])));
        Linear { w, b }
    }

    /// Both weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([fan_in, fan_out]));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros([fan_out])));
        Linear { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(match self.b {
            Some(b) => tape.affine(x, p.var(self.w), p.var(b))?,
            None => tape.matmul(x, p.var(self.w))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full([d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p.var(self.gain), p.var(self.bias), LN_EPS)?)
    }
}

/// `T×T` additive mask: 0 where key `j <= i`, [`MASK_NEG`] above the diagonal.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros([t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.set(&[i, j], MASK_NEG);
        }
    }
    m
}

/// `softmax(q kᵀ / sqrt(d_head) + M) v` per head, heads split along the feature axis.
///
/// `q`, `k`, `v` are `[B, T, d]` with `d` divisible by `heads`.
pub fn causal_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    let (t, d) = (shape[1], shape[2]);
    let dh = d / heads;
    let mask = causal_mask(t);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_last(q, h * dh, dh)?,
                tape.slice_last(k, h * dh, dh)?,
                tape.slice_last(v, h * dh, dh)?,
            )
        };
        let s = tape.bmm(qh, kh, true)?;
        let s = tape.scale(s, scale)?;
        let s = tape.masked_bias(s, &mask)?;
        let a = tape.softmax(s)?;
        outs.push(tape.bmm(a, vh, false)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        Ok(tape.concat_last(&outs)?)
    }
}

/// Position-wise feed-forward: `proj(gelu(fc(x)))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc: Linear,
    pub proj: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        FeedForward {
            fc: Linear::new(store, &format!("{name}.fc"), d, hidden, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), hidden, d, true, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc.apply(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.proj.apply(tape, p, h)
    }
}

/// Pre-norm causal self-attention block:
/// `x + attn(ln1(x))`, then `x + ffn(ln2(x))`.
#[derive(Clone, Debug)]
pub struct SelfBlock {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub ffn: FeedForward,
}

impl SelfBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        SelfBlock {
            ln1: Norm::new(store, &format!("{name}.ln1"), d),
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            ln2: Norm::new(store, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, hidden, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var, heads: usize) -> Result<Var> {
        let h = self.ln1.apply(tape, p, x)?;
        let q = self.q.apply(tape, p, h)?;
        let k = self.k.apply(tape, p, h)?;
        let v = self.v.apply(tape, p, h)?;
        let a = causal_attention(tape, q, k, v, heads)?;
        let a = self.o.apply(tape, p, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.apply(tape, p, x)?;
        let f = self.ffn.apply(tape, p, h)?;
        Ok(tape.add(x, f)?)
    }
}
