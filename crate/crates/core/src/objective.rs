//! Bradley–Terry preference loss, load-balancing regularizer and their sum.
//!
//! With score difference `Δ = ρ¹ − ρ⁰`, `P[σ¹ ≻ σ⁰] = logistic(Δ)` and the
//! per-pair cross-entropy is `y·softplus(−Δ) + (1 − y)·softplus(Δ)`, which
//! never takes the log of a computed probability.

use numcore::{logistic, softplus_f64, Tape, Tensor, Var};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::RewardModel;
use crate::params::Bound;
use crate::segment::{Segment, SegmentBatch};

/// Preference label `y ∈ {0, 0.5, 1}`: `One` prefers the second segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PreferenceLabel {
    Zero,
    Tie,
    One,
}

impl PreferenceLabel {
    pub fn value(self) -> f64 {
        match self {
            PreferenceLabel::Zero => 0.0,
            PreferenceLabel::Tie => 0.5,
            PreferenceLabel::One => 1.0,
        }
    }

    pub fn from_value(y: f64) -> Result<Self> {
        if y == 0.0 {
            Ok(PreferenceLabel::Zero)
        } else if y == 0.5 {
            Ok(PreferenceLabel::Tie)
        } else if y == 1.0 {
            Ok(PreferenceLabel::One)
        } else {
            Err(Error::Data(format!("label {y} not in {{0, 0.5, 1}}")))
        }
    }

    pub fn is_tie(self) -> bool {
        self == PreferenceLabel::Tie
    }

    /// `0 ↔ 1`; ties stay ties.
    pub fn flipped(self) -> Self {
        match self {
            PreferenceLabel::Zero => PreferenceLabel::One,
            PreferenceLabel::One => PreferenceLabel::Zero,
            PreferenceLabel::Tie => PreferenceLabel::Tie,
        }
    }
}

impl Serialize for PreferenceLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for PreferenceLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let y = f64::deserialize(d)?;
        PreferenceLabel::from_value(y).map_err(serde::de::Error::custom)
    }
}

/// `P[σ¹ ≻ σ⁰] = exp(ρ¹) / (exp(ρ⁰) + exp(ρ¹))`, evaluated as `logistic(ρ¹ − ρ⁰)`.
pub fn bt_probability(rho0: f64, rho1: f64) -> Result<f64> {
    if !rho0.is_finite() || !rho1.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite scores ({rho0}, {rho1})"
        )));
    }
    Ok(logistic(rho1 - rho0))
}

/// Cross-entropy of one pair.
pub fn bt_pair_loss(rho0: f64, rho1: f64, y: f64) -> f64 {
    let delta = rho1 - rho0;
    y * softplus_f64(-delta) + (1.0 - y) * softplus_f64(delta)
}

/// Mean cross-entropy over `(ρ⁰, ρ¹, y)` triples.
pub fn bt_loss(pairs: &[(f64, f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(a, b, y)| bt_pair_loss(a, b, y))
        .sum::<f64>()
        / pairs.len() as f64
}

fn check_simplex(g: &Tensor) -> Result<(usize, usize)> {
    if g.rank() != 2 {
        return Err(Error::Input(format!(
            "routing weights must be [B, K], got {:?}",
            g.shape()
        )));
    }
    let (b, k) = (g.shape()[0], g.shape()[1]);
    for r in 0..b {
        let row = &g.data()[r * k..(r + 1) * k];
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < -1e-6) {
            return Err(Error::Numerical(format!(
                "routing row {r} off the simplex (sum {s})"
            )));
        }
    }
    Ok((b, k))
}

/// `Σ_k (mean_b g_{b,k} − 1/K)²`.
pub fn load_balance(g: &Tensor) -> Result<f64> {
    let (b, k) = check_simplex(g)?;
    let mut bal = 0.0;
    for j in 0..k {
        let mean = (0..b).map(|r| g.data()[r * k + j]).sum::<f64>() / b as f64;
        bal += (mean - 1.0 / k as f64).powi(2);
    }
    Ok(bal)
}

/// Tape version of [`bt_loss`] over score vectors `[B]` and labels `[B]`.
pub fn bt_loss_tape(tape: &mut Tape, rho0: Var, rho1: Var, labels: &[f64]) -> Result<Var> {
    let delta = tape.sub(rho1, rho0)?;
    let neg = tape.scale(delta, -1.0)?;
    let sp_neg = tape.softplus(neg)?;
    let sp_pos = tape.softplus(delta)?;
    let y = tape.constant(Tensor::vector(labels.to_vec()))?;
    let not_y = tape.constant(Tensor::vector(labels.iter().map(|v| 1.0 - v).collect()))?;
    let a = tape.mul(sp_neg, y)?;
    let b = tape.mul(sp_pos, not_y)?;
    let per = tape.add(a, b)?;
    Ok(tape.mean_all(per)?)
}

/// Tape version of [`load_balance`] over routing weights `[B, K]`.
pub fn load_balance_tape(tape: &mut Tape, g: Var) -> Result<Var> {
    let (_, k) = check_simplex(tape.value(g))?;
    let usage = tape.mean_axis(g, 0)?;
    let dev = tape.add_scalar(usage, -1.0 / k as f64)?;
    let sq = tape.mul(dev, dev)?;
    Ok(tape.sum_all(sq)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bt: f64,
    pub bal: f64,
    pub total: f64,
    pub lambda: f64,
}

/// A mini-batch of labelled pairs: `first[b]` is σ⁰, `second[b]` is σ¹.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub first: SegmentBatch,
    pub second: SegmentBatch,
    pub labels: Vec<f64>,
}

impl PairBatch {
    pub fn new(first: SegmentBatch, second: SegmentBatch, labels: Vec<f64>) -> Result<Self> {
        if first.len() != second.len() || first.len() != labels.len() {
            return Err(Error::Input(
                "pair batch sides and labels differ in length".into(),
            ));
        }
        for &y in &labels {
            PreferenceLabel::from_value(y)?;
        }
        Ok(PairBatch {
            first,
            second,
            labels,
        })
    }

    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a Segment, &'a Segment, PreferenceLabel)>,
    ) -> Result<Self> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut y = Vec::new();
        for (s0, s1, l) in pairs {
            a.push(s0);
            b.push(s1);
            y.push(l.value());
        }
        PairBatch::new(SegmentBatch::stack(a)?, SegmentBatch::stack(b)?, y)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Both sides as one batch: σ⁰ rows first, then σ¹ rows.
    pub fn joined(&self) -> Result<SegmentBatch> {
        let cat = |x: &Tensor, y: &Tensor| -> Result<Tensor> {
            let mut shape = x.shape().to_vec();
            shape[0] += y.shape()[0];
            let mut d = x.data().to_vec();
            d.extend_from_slice(y.data());
            Ok(Tensor::new(shape, d)?)
        };
        SegmentBatch::new(
            cat(&self.first.states, &self.second.states)?,
            cat(&self.first.actions, &self.second.actions)?,
        )
    }
}

/// Handles of the recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub bt: Var,
    pub bal: Option<Var>,
    pub total: Var,
    /// Routing weights of all `2B` segments, `[2B, K]`.
    pub routing: Option<Var>,
    pub score0: Var,
    pub score1: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, lambda: f64) -> LossBreakdown {
        LossBreakdown {
            bt: tape.value(self.bt).item(),
            bal: self.bal.map_or(0.0, |b| tape.value(b).item()),
            total: tape.value(self.total).item(),
            lambda,
        }
    }
}

/// `L = L_BT + λ L_bal` with both segments of every pair pooled into the
/// routing statistic.
pub fn total_loss_tape<M: RewardModel + ?Sized>(
    tape: &mut Tape,
    model: &M,
    p: &Bound,
    pairs: &PairBatch,
    lambda: f64,
) -> Result<LossVars> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let b = pairs.len();
    let joined = pairs.joined()?;
    let v = model.score_tape(tape, p, &joined)?;
    let score0 = tape.narrow0(v.score, 0, b)?;
    let score1 = tape.narrow0(v.score, b, b)?;
    let bt = bt_loss_tape(tape, score0, score1, &pairs.labels)?;
    let (bal, total) = match v.routing {
        Some(g) => {
            let bal = load_balance_tape(tape, g)?;
            let weighted = tape.scale(bal, lambda)?;
            (Some(bal), tape.add(bt, weighted)?)
        }
        None => (None, bt),
    };
    Ok(LossVars {
        bt,
        bal,
        total,
        routing: v.routing,
        score0,
        score1,
    })
}

/// Untracked [`total_loss_tape`].
pub fn total_loss<M: RewardModel + ?Sized>(
    model: &M,
    pairs: &PairBatch,
    lambda: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false)?;
    let v = total_loss_tape(&mut tape, model, &p, pairs, lambda)?;
    Ok(v.breakdown(&tape, lambda))
}
