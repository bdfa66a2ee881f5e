//! Test helpers and a loop-based reference implementation of the reward
//! model and objective that never touches the tape.

#![allow(dead_code)]

use numcore::{Rng, Tensor};
use prefmoe::datagen::LabeledPair;
use prefmoe::model::RewardModel;
use prefmoe::model::{ModelConfig, PrefMoe};
use prefmoe::objective::PreferenceLabel;
use prefmoe::params::ParamStore;
use prefmoe::segment::{Segment, SegmentBatch};

pub fn random_segment(t: usize, ds: usize, da: usize, rng: &mut Rng) -> Segment {
    Segment::new(
        Tensor::randn([t, ds], 1.0, rng),
        Tensor::randn([t, da], 1.0, rng),
    )
    .unwrap()
}

pub fn random_batch(b: usize, t: usize, ds: usize, da: usize, rng: &mut Rng) -> SegmentBatch {
    SegmentBatch::new(
        Tensor::randn([b, t, ds], 1.0, rng),
        Tensor::randn([b, t, da], 1.0, rng),
    )
    .unwrap()
}

pub fn random_pairs(n: usize, t: usize, ds: usize, da: usize, rng: &mut Rng) -> Vec<LabeledPair> {
    (0..n)
        .map(|i| LabeledPair {
            first: random_segment(t, ds, da, rng),
            second: random_segment(t, ds, da, rng),
            label: [
                PreferenceLabel::Zero,
                PreferenceLabel::One,
                PreferenceLabel::Tie,
            ][i % 3],
        })
        .collect()
}

pub fn tiny_config(k: usize) -> ModelConfig {
    ModelConfig {
        state_dim: 3,
        action_dim: 2,
        max_len: 6,
        width: 8,
        routing_dim: 4,
        experts: k,
        heads: 2,
        intra_layers: 1,
        ffn_mult: 2,
        tanh_head: false,
    }
}

/// Fills every parameter (including the zero-initialized ones) with noise.
pub fn randomize(model: &mut PrefMoe, scale: f64, rng: &mut Rng) {
    for p in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += scale * rng.normal();
        }
    }
}

pub fn set(store: &mut ParamStore, name: &str, mut f: impl FnMut(f64) -> f64) {
    let t = store
        .by_name_mut(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    for v in t.data_mut() {
        *v = f(*v);
    }
}

/// Row-major matrix.
#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn from_tensor(t: &Tensor) -> Self {
        let cols = *t.shape().last().unwrap();
        Mat {
            rows: t.len() / cols,
            cols,
            data: t.data().to_vec(),
        }
    }

    fn add(&self, o: &Mat) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&o.data).map(|(a, b)| a + b).collect(),
        }
    }
}

pub struct Oracle<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a ModelConfig,
}

#[derive(Clone, Debug)]
pub struct OracleOutput {
    pub rewards: Vec<f64>,
    /// `[K][T]`
    pub expert_rewards: Vec<Vec<f64>>,
    pub routing: Vec<f64>,
    pub score: f64,
}

/// `ln(1 / (1 + e^{-x}))`, split by sign so neither branch overflows.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a PrefMoe) -> Self {
        Oracle {
            params: model.params(),
            cfg: model.config(),
        }
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params
            .by_name(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
    }

    fn linear(&self, x: &Mat, name: &str) -> Mat {
        let w = self.p(&format!("{name}.w"));
        let (fi, fo) = (w.shape()[0], w.shape()[1]);
        assert_eq!(fi, x.cols);
        let b = self.params.by_name(&format!("{name}.b"));
        let mut y = Mat::zeros(x.rows, fo);
        for r in 0..x.rows {
            for o in 0..fo {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for i in 0..fi {
                    acc += x.get(r, i) * w.data()[i * fo + o];
                }
                y.data[r * fo + o] = acc;
            }
        }
        y
    }

    fn norm(&self, x: &Mat, name: &str) -> Mat {
        let g = self.p(&format!("{name}.gain")).data();
        let b = self.p(&format!("{name}.bias")).data();
        let mut y = Mat::zeros(x.rows, x.cols);
        let d = x.cols as f64;
        for r in 0..x.rows {
            let row = &x.data[r * x.cols..(r + 1) * x.cols];
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            for c in 0..x.cols {
                y.data[r * x.cols + c] = (row[c] - mean) / (var + 1e-5).sqrt() * g[c] + b[c];
            }
        }
        y
    }

    /// Causal attention that only ever visits keys `j <= i`.
    fn attention(&self, q: &Mat, k: &Mat, v: &Mat) -> Mat {
        let heads = self.cfg.heads;
        let dh = q.cols / heads;
        let mut out = Mat::zeros(q.rows, q.cols);
        for h in 0..heads {
            for i in 0..q.rows {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    out.data[i * q.cols + h * dh + c] =
                        (0..=i).map(|j| e[j] / z * v.get(j, h * dh + c)).sum();
                }
            }
        }
        out
    }

    fn ffn(&self, x: &Mat, name: &str) -> Mat {
        let mut h = self.linear(x, &format!("{name}.fc"));
        for v in &mut h.data {
            *v = gelu(*v);
        }
        self.linear(&h, &format!("{name}.proj"))
    }

    pub fn embed(&self, seg: &Segment) -> (Mat, Mat) {
        let t = seg.len();
        let pos = self.p("embed.pos");
        let d = self.cfg.width;
        let pos = Mat {
            rows: t,
            cols: d,
            data: pos.data()[..t * d].to_vec(),
        };
        let xs = self
            .linear(&Mat::from_tensor(&seg.states), "embed.state")
            .add(&pos);
        let xa = self
            .linear(&Mat::from_tensor(&seg.actions), "embed.action")
            .add(&pos);
        (xs, xa)
    }

    pub fn intra(&self, x: &Mat) -> Mat {
        let mut x = x.clone();
        for l in 0..self.cfg.intra_layers {
            let n = |s: &str| format!("intra.{l}.{s}");
            let h = self.norm(&x, &n("ln1"));
            let a = self.attention(
                &self.linear(&h, &n("q")),
                &self.linear(&h, &n("k")),
                &self.linear(&h, &n("v")),
            );
            x = x.add(&self.linear(&a, &n("o")));
            let h = self.norm(&x, &n("ln2"));
            x = x.add(&self.ffn(&h, &n("ffn")));
        }
        self.norm(&x, "intra.ln_f")
    }

    pub fn routing(&self, xs: &Mat, xa: &Mat) -> Vec<f64> {
        let t = xs.rows as f64;
        let mut mean = Mat::zeros(1, xs.cols);
        for r in 0..xs.rows {
            for c in 0..xs.cols {
                mean.data[c] += (xs.get(r, c) + xa.get(r, c)) / t;
            }
        }
        let c = self.norm(&self.linear(&mean, "router.ctx"), "router.ctx_norm");
        let mut h = self.linear(&c, "router.hidden");
        for v in &mut h.data {
            *v = v.max(0.0);
        }
        let logits = self.linear(&h, "router.out").data;
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    pub fn expert(&self, xs: &Mat, xa: &Mat, k: usize) -> Vec<f64> {
        let n = |s: &str| format!("expert.{k}.{s}");
        let sn = self.norm(xs, &n("ln_s"));
        let an = self.norm(xa, &n("ln_a"));
        let zs = self.attention(
            &self.linear(&sn, &n("q_s")),
            &self.linear(&an, &n("k_a")),
            &self.linear(&an, &n("v_a")),
        );
        let za = self.attention(
            &self.linear(&an, &n("q_a")),
            &self.linear(&sn, &n("k_s")),
            &self.linear(&sn, &n("v_s")),
        );
        let hs = xs.add(&self.linear(&zs, &n("o_s")));
        let ha = xa.add(&self.linear(&za, &n("o_a")));
        let hs = hs.add(&self.ffn(&self.norm(&hs, &n("ln_ff")), &n("ffn")));
        let ha = ha.add(&self.ffn(&self.norm(&ha, &n("ln_ff")), &n("ffn")));
        let d = self.cfg.width;
        let mut z = Mat::zeros(xs.rows, 2 * d);
        for r in 0..xs.rows {
            for c in 0..d {
                z.data[r * 2 * d + c] = hs.get(r, c);
                z.data[r * 2 * d + d + c] = ha.get(r, c);
            }
        }
        let r = self.linear(&z, &n("head")).data;
        if self.cfg.tanh_head {
            r.iter().map(|v| v.tanh()).collect()
        } else {
            r
        }
    }

    pub fn forward(&self, seg: &Segment) -> OracleOutput {
        let (xs, xa) = self.embed(seg);
        let (hs, ha) = (self.intra(&xs), self.intra(&xa));
        let g = self.routing(&hs, &ha);
        let er: Vec<Vec<f64>> = (0..self.cfg.experts)
            .map(|k| self.expert(&hs, &ha, k))
            .collect();
        let rewards: Vec<f64> = (0..seg.len())
            .map(|t| (0..g.len()).map(|k| g[k] * er[k][t]).sum())
            .collect();
        let score = rewards.iter().sum();
        OracleOutput {
            rewards,
            expert_rewards: er,
            routing: g,
            score,
        }
    }

    /// `(bt, bal, total)` of the combined objective.
    pub fn total_loss(&self, pairs: &[LabeledPair], lambda: f64) -> (f64, f64, f64) {
        let mut bt = 0.0;
        let k = self.cfg.experts;
        let mut usage = vec![0.0; k];
        for pair in pairs {
            let a = self.forward(&pair.first);
            let b = self.forward(&pair.second);
            let y = pair.label.value();
            let d = b.score - a.score;
            bt -= y * log_sigmoid(d) + (1.0 - y) * log_sigmoid(-d);
            for (j, u) in usage.iter_mut().enumerate() {
                *u += a.routing[j] + b.routing[j];
            }
        }
        let n = pairs.len() as f64;
        let bal: f64 = usage
            .iter()
            .map(|u| (u / (2.0 * n) - 1.0 / k as f64).powi(2))
            .sum();
        (bt / n, bal, bt / n + lambda * bal)
    }
}
