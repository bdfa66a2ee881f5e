//! AdamW with cosine decay, seeded mini-batching and best-validation
//! checkpoint selection.

use numcore::{Rng, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledPair;
use crate::error::{Error, Result};
use crate::model::RewardModel;
use crate::objective::{total_loss_tape, LossBreakdown};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Load-balancing weight `λ`.
    pub lambda: f64,
    pub seed: u64,
    /// Validate every this many epochs (and after the last epoch).
    pub eval_every: usize,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-4,
            batch_size: 32,
            epochs: 100,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 1e-2,
            seed: 0,
            eval_every: 1,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0)
            || self.batch_size == 0
            || self.epochs == 0
            || self.eval_every == 0
        {
            return Err(Error::Config(
                "need peak_lr >= 0, batch_size, epochs and eval_every >= 1".into(),
            ));
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lambda and weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config("betas must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update: `θ ← θ − lr·wd·θ − lr·m̂ / (√v̂ + ε)`.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Input(
            "gradient count does not match parameter count".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.value.shape() {
            return Err(Error::Input(format!(
                "gradient shape mismatch for {}",
                p.name
            )));
        }
        let theta = p.value.data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..theta.len() {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            theta[j] -= lr * cfg.weight_decay * theta[j] + lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `peak · ½(1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total: usize, peak: f64) -> Result<f64> {
    if step > total || total == 0 {
        return Err(Error::Input(format!("step {step} outside [0, {total}]")));
    }
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Pair-weighted mean of mini-batch losses.
    pub train: LossBreakdown,
    /// Validation cross-entropy, when validated this epoch.
    pub validation: Option<f64>,
    /// Mean routing weight per expert over all training segments seen.
    pub usage: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_validation: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ReportLine {
    Epoch(EpochRecord),
    Summary(TrainSummary),
}

impl TrainReport {
    /// One line per epoch, then a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&ReportLine::Epoch(e.clone()))?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&ReportLine::Summary(
            self.summary.clone(),
        ))?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut epochs = Vec::new();
        let mut summary = None;
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            match serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?
            {
                ReportLine::Epoch(e) => epochs.push(e),
                ReportLine::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or_else(|| Error::Data("report has no summary line".into()))?;
        Ok(TrainReport { epochs, summary })
    }
}

/// Validation cross-entropy of `model` on `pairs`.
pub fn validation_loss<M: RewardModel + ?Sized>(model: &M, pairs: &[LabeledPair]) -> Result<f64> {
    let batch = LabeledPair::batch(pairs)?;
    Ok(crate::objective::total_loss(model, &batch, 0.0)?.bt)
}

/// Trains `model` and returns the parameters with the lowest validation
/// loss along with the per-epoch report.
pub fn train<M: RewardModel + Clone>(
    mut model: M,
    train_pairs: &[LabeledPair],
    validation: &[LabeledPair],
    cfg: &TrainConfig,
) -> Result<(M, TrainReport)> {
    cfg.validate()?;
    if train_pairs.is_empty() || validation.is_empty() {
        return Err(Error::Data(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let k = model.experts();
    let steps_per_epoch = train_pairs.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamState::new(model.params());
    let mut rng = Rng::new(cfg.seed).fork("batches");
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut acc = [0.0f64; 3];
        let mut usage = vec![0.0; k];
        let mut routed = 0usize;
        let mut has_routing = false;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = LabeledPair::batch(chunk.iter().map(|&i| &train_pairs[i]))?;
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape, true)?;
            let v = total_loss_tape(&mut tape, &model, &p, &batch, cfg.lambda)?;
            let b = v.breakdown(&tape, cfg.lambda);
            if !b.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            let w = chunk.len() as f64;
            acc[0] += w * b.bt;
            acc[1] += w * b.bal;
            acc[2] += w * b.total;
            if let Some(g) = v.routing {
                has_routing = true;
                let g = tape.value(g);
                let rows = g.shape()[0];
                for row in g.data().chunks(k) {
                    for (u, x) in usage.iter_mut().zip(row) {
                        *u += x;
                    }
                }
                routed += rows;
            }
            let grads = tape.backward(v.total)?;
            let mut grads = p.gradients(&grads, model.params());
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            lr = cosine_lr(step, total, cfg.peak_lr)?;
            optimizer_step(model.params_mut(), &grads, &mut opt, lr, cfg)?;
            step += 1;
        }
        let n = train_pairs.len() as f64;
        let train = LossBreakdown {
            bt: acc[0] / n,
            bal: acc[1] / n,
            total: acc[2] / n,
            lambda: cfg.lambda,
        };
        let validate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let val = if validate {
            let l = validation_loss(&model, validation)?;
            if !l.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite validation loss at epoch {epoch}"
                )));
            }
            if best.as_ref().is_none_or(|(_, b, _)| l < *b) {
                best = Some((epoch, l, model.params().clone()));
            }
            Some(l)
        } else {
            None
        };
        epochs.push(EpochRecord {
            epoch,
            lr,
            train,
            validation: val,
            usage: has_routing.then(|| usage.iter().map(|u| u / routed as f64).collect()),
        });
    }
    let (best_epoch, best_validation, params) = best.expect("last epoch is always validated");
    *model.params_mut() = params;
    Ok((
        model,
        TrainReport {
            epochs,
            summary: TrainSummary {
                best_epoch,
                best_validation,
                steps: step,
            },
        },
    ))
}
