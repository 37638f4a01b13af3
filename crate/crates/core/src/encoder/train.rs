use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{EncoderModel, ModelParams};
use super::task::{SyntheticTask, Utterance};
use crate::ann::ExactIndex;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionContext;
use crate::memory::ExternalMemory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Utterances per optimiser step.
    pub batch: usize,
    pub seed: u64,
    /// Tail fraction of the training split held out for the loss trace.
    pub holdout_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 4,
            batch: 8,
            seed: 0,
            holdout_frac: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and ≥ 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::Config(format!("holdout_frac must be in (0, 1), got {}", self.holdout_frac)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps > 0".into()));
        }
        if !(self.clip >= 0.0) {
            return Err(Error::Config(format!("clip must be ≥ 0, got {}", self.clip)));
        }
        Ok(())
    }

    pub fn overlay(mut self, kv: &KvConfig) -> Result<Self> {
        self.lr = kv.get_or("train.lr", self.lr)?;
        self.epochs = kv.get_or("train.epochs", self.epochs)?;
        self.batch = kv.get_or("train.batch", self.batch)?;
        self.seed = kv.get_or("train.seed", self.seed)?;
        self.holdout_frac = kv.get_or("train.holdout_frac", self.holdout_frac)?;
        self.clip = kv.get_or("train.clip", self.clip)?;
        Ok(self)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("train.lr", self.lr);
        kv.set("train.epochs", self.epochs);
        kv.set("train.batch", self.batch);
        kv.set("train.seed", self.seed);
        kv.set("train.holdout_frac", self.holdout_frac);
        kv.set("train.clip", self.clip);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-frame cross-entropy on the held-out slice: before training,
    /// then after each epoch.
    pub heldout_loss: Vec<f64>,
    /// Mean per-frame training cross-entropy of each epoch.
    pub train_loss: Vec<f64>,
    pub steps: usize,
}

/// Summed cross-entropy over frames and `softmax − onehot` per frame.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[u32]) -> (f64, Array2<f64>) {
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let target = row[y as usize];
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        loss += sum.ln() + max - target;
        row.mapv_inplace(|v| v / sum);
        row[y as usize] -= 1.0;
    }
    (loss, grad)
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn new(p: &ModelParams) -> Self {
        Self {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
                p[i] -= cfg.lr * update;
            }
        }
    }
}

fn contexts(model: &EncoderModel, utts: &[Utterance], memory: Option<&ExternalMemory>) -> Result<Vec<Option<FusionContext>>> {
    let exact = memory.map(ExactIndex::new);
    utts.iter()
        .map(|u| {
            model.context(
                u.frames.view(),
                exact.as_ref().map(|e| e as &dyn crate::ann::Retriever),
            )
        })
        .collect()
}

/// Mean per-frame cross-entropy of `model` over `utts`.
pub fn mean_loss(model: &EncoderModel, utts: &[Utterance], ctxs: &[Option<FusionContext>]) -> Result<f64> {
    let mut total = 0.0;
    let mut frames = 0usize;
    for (u, c) in utts.iter().zip(ctxs) {
        let logits = model.logits(u.frames.view(), c.as_ref())?;
        total += cross_entropy(&logits, &u.labels).0;
        frames += u.labels.len();
    }
    Ok(total / frames as f64)
}

/// Adam on per-frame cross-entropy, retrieving with the exact index over
/// `memory`. Contexts depend only on input frames and the memory, so they
/// are gathered once up front.
pub fn train(
    model: &mut EncoderModel,
    task: &SyntheticTask,
    memory: Option<&ExternalMemory>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if task.train.len() < 2 {
        return Err(Error::NoData("need at least two training utterances".into()));
    }
    if model.vocab_size() != task.vocab_size() {
        return Err(Error::Shape(format!(
            "model scores {} labels, task has {}",
            model.vocab_size(),
            task.vocab_size()
        )));
    }
    let n_hold = ((task.train.len() as f64 * cfg.holdout_frac).ceil() as usize).clamp(1, task.train.len() - 1);
    let (fit, held) = task.train.split_at(task.train.len() - n_hold);
    let fit_ctx = contexts(model, fit, memory)?;
    let held_ctx = contexts(model, held, memory)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params());
    let mut report = TrainReport {
        heldout_loss: vec![mean_loss(model, held, &held_ctx)?],
        train_loss: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut per_utt = vec![0.0; fit.len()];
    let fit_frames: usize = fit.iter().map(|u| u.labels.len()).sum();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let frames: usize = batch.iter().map(|&i| fit[i].labels.len()).sum();
            let mut grads = model.params().zeros_like();
            for &i in batch {
                let u = &fit[i];
                let (logits, cache) = model.run(u.frames.view(), fit_ctx[i].as_ref(), Some(&mut rng))?;
                let (loss, mut d_logits) = cross_entropy(&logits, &u.labels);
                if !loss.is_finite() {
                    return Err(Error::Training {
                        step: report.steps,
                        reason: format!("loss is {loss}"),
                    });
                }
                per_utt[i] = loss;
                d_logits /= frames as f64;
                model.backward(&cache, &d_logits, &mut grads)?;
            }
            if cfg.clip > 0.0 {
                let norm = grads.tensors().iter().flat_map(|t| t.iter()).map(|g| g * g).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(Error::Training {
                        step: report.steps,
                        reason: "non-finite gradient".into(),
                    });
                }
                if norm > cfg.clip {
                    let s = cfg.clip / norm;
                    grads.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|g| *g *= s));
                }
            }
            adam.step(model.params_mut(), &grads, cfg);
            if !model.params().all_finite() {
                return Err(Error::Training {
                    step: report.steps,
                    reason: "non-finite parameters after update".into(),
                });
            }
            report.steps += 1;
        }
        // summed in utterance order so the trace does not depend on shuffling
        report.train_loss.push(per_utt.iter().sum::<f64>() / fit_frames as f64);
        report.heldout_loss.push(mean_loss(model, held, &held_ctx)?);
    }
    Ok(report)
}
