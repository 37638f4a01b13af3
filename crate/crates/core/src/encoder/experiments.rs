use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;

use super::model::{EncoderConfig, EncoderModel};
use super::task::{SyntheticTask, TokenKind, Utterance};
use super::train::{train, TrainConfig, TrainReport};
use crate::ann::{AnnIndex, AnnParams, AnnSearcher, Retriever};
use crate::error::{Error, Result};
use crate::memory::ExternalMemory;

/// Approximate-retrieval settings used at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRetrieval {
    pub ann: AnnParams,
    pub ef_search: usize,
}

impl EvalRetrieval {
    /// Catalog-sized defaults: 1-d subspaces, 64 coarse centroids.
    pub fn for_dim(d_key: usize) -> Self {
        let mut ann = AnnParams::for_dim(d_key);
        ann.n_subspaces = d_key;
        ann.n_centroids = 64;
        ann.opq_iters = 4;
        Self { ann, ef_search: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_utterances: usize,
    pub n_frames: usize,
    /// Fraction of misclassified frames.
    pub token_error_rate: f64,
    pub n_rare_frames: usize,
    /// Frame accuracy over frames labelled with a rare token (1.0 when
    /// there are none).
    pub rare_token_accuracy: f64,
    /// Frame accuracy per rare token id.
    pub per_rare_token_accuracy: BTreeMap<u32, f64>,
    /// Mean forward time per utterance including retrieval, µs.
    pub fused_latency_us: f64,
    /// Mean forward time per utterance with fusion sites bypassed, µs.
    pub plain_latency_us: f64,
    pub model_fingerprint: String,
}

impl EvalReport {
    pub fn latency_ratio(&self) -> f64 {
        self.fused_latency_us / self.plain_latency_us
    }

    /// Equality on everything except wall-clock measurements.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.n_utterances == other.n_utterances
            && self.n_frames == other.n_frames
            && self.token_error_rate == other.token_error_rate
            && self.n_rare_frames == other.n_rare_frames
            && self.rare_token_accuracy == other.rare_token_accuracy
            && self.per_rare_token_accuracy == other.per_rare_token_accuracy
            && self.model_fingerprint == other.model_fingerprint
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-frame predictions, using `retriever` at the fusion sites.
pub fn predict(model: &EncoderModel, frames: &Array2<f64>, retriever: Option<&dyn Retriever>) -> Result<Vec<u32>> {
    let logits = model.encoder_forward(frames.view(), retriever)?;
    Ok(logits.rows().into_iter().map(|r| argmax(r) as u32).collect())
}

/// Mean per-utterance latency (µs) of the fused and plain forward passes,
/// best of `reps` sweeps over `utts`.
pub fn measure_latency(
    model: &EncoderModel,
    utts: &[Utterance],
    retriever: Option<&dyn Retriever>,
    reps: usize,
) -> Result<(f64, f64)> {
    if utts.is_empty() {
        return Err(Error::NoData("no utterances to time".into()));
    }
    let mut fused = f64::INFINITY;
    let mut plain = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        for u in utts {
            std::hint::black_box(model.encoder_forward(u.frames.view(), retriever)?);
        }
        fused = fused.min(t.elapsed().as_secs_f64());
        let t = Instant::now();
        for u in utts {
            std::hint::black_box(model.logits(u.frames.view(), None)?);
        }
        plain = plain.min(t.elapsed().as_secs_f64());
    }
    let n = utts.len() as f64;
    Ok((fused * 1e6 / n, plain * 1e6 / n))
}

/// Token error rate and rare-token accuracy of `model` on `utts`.
pub fn evaluate(
    model: &EncoderModel,
    kinds: &[TokenKind],
    utts: &[Utterance],
    retriever: Option<&dyn Retriever>,
) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::NoData("empty evaluation set".into()));
    }
    if kinds.len() != model.vocab_size() {
        return Err(Error::Shape(format!(
            "{} token kinds for a {}-label model",
            kinds.len(),
            model.vocab_size()
        )));
    }
    if let Some(r) = retriever {
        model.check_memory(r.memory().d_key(), r.memory().d_value())?;
    }
    let mut errors = 0usize;
    let mut frames = 0usize;
    let mut per_token: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for u in utts {
        let pred = predict(model, &u.frames, retriever)?;
        for (&p, &y) in pred.iter().zip(&u.labels) {
            frames += 1;
            if p != y {
                errors += 1;
            }
            if kinds[y as usize].is_rare() {
                let e = per_token.entry(y).or_default();
                e.0 += usize::from(p == y);
                e.1 += 1;
            }
        }
    }
    let (rare_hits, rare_total) = per_token.values().fold((0, 0), |a, v| (a.0 + v.0, a.1 + v.1));
    let (fused, plain) = measure_latency(model, utts, retriever, 1)?;
    Ok(EvalReport {
        n_utterances: utts.len(),
        n_frames: frames,
        token_error_rate: errors as f64 / frames as f64,
        n_rare_frames: rare_total,
        rare_token_accuracy: if rare_total == 0 {
            1.0
        } else {
            rare_hits as f64 / rare_total as f64
        },
        per_rare_token_accuracy: per_token
            .into_iter()
            .map(|(t, (h, n))| (t, h as f64 / n as f64))
            .collect(),
        fused_latency_us: fused,
        plain_latency_us: plain,
        model_fingerprint: model.fingerprint(),
    })
}

/// Evaluate on the test split with an approximate index over `memory`.
pub fn evaluate_with_memory(
    model: &EncoderModel,
    task: &SyntheticTask,
    memory: &ExternalMemory,
    retrieval: &EvalRetrieval,
) -> Result<EvalReport> {
    model.check_memory(memory.d_key(), memory.d_value())?;
    let index = AnnIndex::build(memory, &retrieval.ann)?;
    let searcher = AnnSearcher::new(&index, memory, retrieval.ef_search)?;
    evaluate(model, &task.kinds, &task.test, Some(&searcher))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub overlap: f64,
    pub report: EvalReport,
}

/// `{0.0, 0.1, …, 1.0}`.
pub fn default_overlap_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// One evaluation per overlap value, each against a freshly assembled test
/// catalog; the model is never touched.
pub fn overlap_sweep(
    model: &EncoderModel,
    task: &SyntheticTask,
    grid: &[f64],
    retrieval: &EvalRetrieval,
) -> Result<Vec<SweepPoint>> {
    if !model.has_fusion() {
        return Err(Error::Config("overlap sweep needs a model with at least one fusion site".into()));
    }
    grid.iter()
        .map(|&overlap| {
            let memory = task.build_memory(&task.test_catalog(overlap)?)?;
            Ok(SweepPoint {
                overlap,
                report: evaluate_with_memory(model, task, &memory, retrieval)?,
            })
        })
        .collect()
}

/// Site sets spanning first, middle, last, a mid pair and every block.
/// The empty set (no fusion) comes first.
pub fn standard_site_sets(n_layers: usize) -> Vec<Vec<usize>> {
    let n = n_layers.max(1);
    let ceil = |num: usize, den: usize| num.div_ceil(den).clamp(1, n);
    let mut pair = vec![ceil(3 * n, 16), ceil(12 * n, 16)];
    pair.dedup();
    vec![
        vec![],
        vec![1],
        vec![ceil(n, 2)],
        vec![n],
        pair,
        (1..=n).collect(),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub sites: Vec<usize>,
    pub report: EvalReport,
    /// Best-of-several fused / plain forward time.
    pub latency_ratio: f64,
    pub train: TrainReport,
}

/// Train one model per site set from the same seeds and evaluate each on
/// the test split against `eval_memory`.
pub fn layer_ablation(
    task: &SyntheticTask,
    base: &EncoderConfig,
    site_sets: &[Vec<usize>],
    train_cfg: &TrainConfig,
    train_memory: &ExternalMemory,
    eval_memory: &ExternalMemory,
    retrieval: &EvalRetrieval,
    latency_reps: usize,
) -> Result<Vec<AblationRow>> {
    let index = AnnIndex::build(eval_memory, &retrieval.ann)?;
    let searcher = AnnSearcher::new(&index, eval_memory, retrieval.ef_search)?;
    let mut rows = Vec::with_capacity(site_sets.len());
    for sites in site_sets {
        let cfg = EncoderConfig {
            fusion_at: sites.clone(),
            ..base.clone()
        };
        let mut model = EncoderModel::new(cfg, task.label_table.clone())?;
        let trained = train(&mut model, task, Some(train_memory), train_cfg)?;
        let report = evaluate(&model, &task.kinds, &task.test, Some(&searcher))?;
        let (fused, plain) = measure_latency(&model, &task.test, Some(&searcher), latency_reps)?;
        log::info!(
            "sites {:?}: ter {:.4}, rare acc {:.4}, latency ratio {:.3}",
            sites,
            report.token_error_rate,
            report.rare_token_accuracy,
            fused / plain
        );
        rows.push(AblationRow {
            sites: sites.clone(),
            report,
            latency_ratio: fused / plain,
            train: trained,
        });
    }
    Ok(rows)
}

/// Evaluate `model` against a replacement memory without touching its
/// weights.
pub fn swap_catalog_eval(
    model: &EncoderModel,
    task: &SyntheticTask,
    new_memory: &ExternalMemory,
    retrieval: &EvalRetrieval,
) -> Result<EvalReport> {
    let before = model.fingerprint();
    let report = evaluate_with_memory(model, task, new_memory, retrieval)?;
    if report.model_fingerprint != before {
        return Err(Error::Consistency("model weights changed during evaluation".into()));
    }
    Ok(report)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("need two equal-length series of ≥ 2 points".into()));
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}
