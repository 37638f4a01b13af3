use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::block::{self, BlockCache, BlockParams, LN_EPS};
use crate::ann::Retriever;
use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::fusion::{
    fusion_backward, fusion_forward, gather_context, layer_norm_rows, layer_norm_rows_backward, FusionContext,
    FusionParams, FusionTape, LnCache,
};

const CKPT_MAGIC: &[u8; 8] = b"KNNFCKP\0";
const CKPT_VERSION: u32 = 1;

/// Initial gain of the fused-branch LayerNorm; keeps the injected context
/// below the scale of the residual stream.
const FUSION_LN_GAIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    /// 1-based block indices; fusion runs just before each listed block.
    pub fusion_at: Vec<usize>,
    pub dropout: f64,
    pub seed: u64,
    /// Neighbours retrieved per frame.
    pub m: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            d_model: 64,
            ffn_dim: 128,
            fusion_at: Vec::new(),
            dropout: 0.0,
            seed: 0,
            m: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.ffn_dim == 0 || self.m == 0 {
            return Err(Error::Config(format!(
                "n_layers, d_model, ffn_dim and m must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.fusion_at.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "fusion_at must be strictly increasing, got {:?}",
                self.fusion_at
            )));
        }
        if let Some(&bad) = self.fusion_at.iter().find(|&&l| l == 0 || l > self.n_layers) {
            return Err(Error::Config(format!(
                "fusion site {bad} outside [1, {}]",
                self.n_layers
            )));
        }
        Ok(())
    }

    /// Reads `n_layers`, `d_model`, `ffn_dim`, `fusion_at`, `dropout`,
    /// `seed`, `m`; missing keys keep their value from `self`.
    pub fn overlay(mut self, kv: &KvConfig) -> Result<Self> {
        self.n_layers = kv.get_or("n_layers", self.n_layers)?;
        self.d_model = kv.get_or("d_model", self.d_model)?;
        self.ffn_dim = kv.get_or("ffn_dim", self.ffn_dim)?;
        if let Some(sites) = kv.get_list("fusion_at")? {
            self.fusion_at = sites;
        }
        self.dropout = kv.get_or("dropout", self.dropout)?;
        self.seed = kv.get_or("seed", self.seed)?;
        self.m = kv.get_or("m", self.m)?;
        Ok(self)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("n_layers", self.n_layers);
        kv.set("d_model", self.d_model);
        kv.set("ffn_dim", self.ffn_dim);
        kv.set("fusion_at", join(&self.fusion_at));
        kv.set("dropout", self.dropout);
        kv.set("seed", self.seed);
        kv.set("m", self.m);
    }
}

pub(crate) fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Trainable parameters; gradients and optimiser moments share the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<BlockParams>,
    /// One per fusion site, in `fusion_at` order.
    pub fusion: Vec<FusionParams>,
    pub lnf_gamma: Array1<f64>,
    pub lnf_beta: Array1<f64>,
    /// d_model × d_value projection into the label-embedding space.
    pub w_out: Array2<f64>,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            fusion: self
                .fusion
                .iter()
                .map(|f| FusionParams {
                    w_q: Array2::zeros(f.w_q.raw_dim()),
                    w_v: Array2::zeros(f.w_v.raw_dim()),
                    ln_gamma: Array1::zeros(f.ln_gamma.raw_dim()),
                    ln_beta: Array1::zeros(f.ln_beta.raw_dim()),
                    ln_eps: f.ln_eps,
                    m: f.m,
                })
                .collect(),
            lnf_gamma: Array1::zeros(self.lnf_gamma.raw_dim()),
            lnf_beta: Array1::zeros(self.lnf_beta.raw_dim()),
            w_out: Array2::zeros(self.w_out.raw_dim()),
        }
    }

    /// Every trainable tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        for f in &self.fusion {
            out.push(f.w_q.as_slice().unwrap());
            out.push(f.w_v.as_slice().unwrap());
            out.push(f.ln_gamma.as_slice().unwrap());
            out.push(f.ln_beta.as_slice().unwrap());
        }
        out.push(self.lnf_gamma.as_slice().unwrap());
        out.push(self.lnf_beta.as_slice().unwrap());
        out.push(self.w_out.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        for f in &mut self.fusion {
            out.push(f.w_q.as_slice_mut().unwrap());
            out.push(f.w_v.as_slice_mut().unwrap());
            out.push(f.ln_gamma.as_slice_mut().unwrap());
            out.push(f.ln_beta.as_slice_mut().unwrap());
        }
        out.push(self.lnf_gamma.as_slice_mut().unwrap());
        out.push(self.lnf_beta.as_slice_mut().unwrap());
        out.push(self.w_out.as_slice_mut().unwrap());
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Toy encoder: a block stack with KNN fusion before selected blocks and
/// logits tied to a fixed label-embedding table.
///
/// The output layer scores every label by the dot product of the
/// projected final state with that label's embedding, so labels the model
/// never saw during training can still win if the fused context carries
/// their embedding.
///
/// Frames enter the stack scaled by √d_model; retrieval always queries with
/// the unscaled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    cfg: EncoderConfig,
    params: ModelParams,
    /// vocab × d_value, not trained.
    label_table: Array2<f64>,
}

pub(crate) struct ForwardCache {
    blocks: Vec<BlockCache>,
    fusion: Vec<FusionTape>,
    lnf: LnCache,
    final_norm: Array2<f64>,
}

impl EncoderModel {
    pub fn new(cfg: EncoderConfig, label_table: Array2<f64>) -> Result<Self> {
        cfg.validate()?;
        if label_table.nrows() == 0 || label_table.ncols() == 0 {
            return Err(Error::InvalidArgument("label table must be non-empty".into()));
        }
        if !label_table.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("label table contains non-finite values".into()));
        }
        let label_table = label_table.as_standard_layout().into_owned();
        let d = cfg.d_model;
        let dv = label_table.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let blocks = (0..cfg.n_layers).map(|_| BlockParams::init(d, cfg.ffn_dim, &mut rng)).collect();
        let fusion = cfg
            .fusion_at
            .iter()
            .map(|_| {
                let mut f = FusionParams::init(d, d, dv, cfg.m, &mut rng);
                // queries start as the scaled input itself, so attention
                // begins by picking the keys nearest each frame
                f.w_q = Array2::eye(d) * (d as f64).sqrt();
                f.ln_gamma.fill(FUSION_LN_GAIN);
                f
            })
            .collect::<Vec<_>>();
        let scale = (1.0 / d as f64).sqrt();
        let w_out = Array2::from_shape_fn((d, dv), |_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let params = ModelParams {
            blocks,
            fusion,
            lnf_gamma: Array1::ones(d),
            lnf_beta: Array1::zeros(d),
            w_out,
        };
        Ok(Self {
            cfg,
            params,
            label_table,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn label_table(&self) -> &Array2<f64> {
        &self.label_table
    }

    pub fn vocab_size(&self) -> usize {
        self.label_table.nrows()
    }

    pub fn d_value(&self) -> usize {
        self.label_table.ncols()
    }

    pub fn has_fusion(&self) -> bool {
        !self.cfg.fusion_at.is_empty()
    }

    /// Hex digest over the configuration, label table and every weight.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_bytes());
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Context for `frames`: `None` without fusion sites; the empty context
    /// when `retriever` is absent.
    pub fn context(&self, frames: ArrayView2<f64>, retriever: Option<&dyn Retriever>) -> Result<Option<FusionContext>> {
        if !self.has_fusion() {
            return Ok(None);
        }
        let Some(r) = retriever else {
            return Ok(Some(FusionContext::empty(self.cfg.d_model, self.d_value())));
        };
        self.check_memory(r.memory().d_key(), r.memory().d_value())?;
        gather_context(frames, r, self.cfg.m).map(Some)
    }

    pub fn check_memory(&self, d_key: usize, d_value: usize) -> Result<()> {
        if d_key != self.cfg.d_model || d_value != self.d_value() {
            return Err(Error::Shape(format!(
                "memory is {d_key}/{d_value} (key/value) but the model needs {}/{}",
                self.cfg.d_model,
                self.d_value()
            )));
        }
        Ok(())
    }

    /// Per-frame label logits, retrieving from `retriever` at each fusion
    /// site (or using the empty context when it is absent).
    pub fn encoder_forward(&self, frames: ArrayView2<f64>, retriever: Option<&dyn Retriever>) -> Result<Array2<f64>> {
        let ctx = self.context(frames, retriever)?;
        self.logits(frames, ctx.as_ref())
    }

    /// Logits with a precomputed context. `None` bypasses the fusion sites
    /// entirely (the plain stack).
    pub fn logits(&self, frames: ArrayView2<f64>, ctx: Option<&FusionContext>) -> Result<Array2<f64>> {
        Ok(self.run(frames, ctx, None)?.0)
    }

    pub(crate) fn run(
        &self,
        frames: ArrayView2<f64>,
        ctx: Option<&FusionContext>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        if frames.ncols() != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "frames have dimension {}, model expects {}",
                frames.ncols(),
                self.cfg.d_model
            )));
        }
        if frames.nrows() == 0 {
            return Err(Error::InvalidArgument("utterance has no frames".into()));
        }
        let mut h = frames.to_owned() * (self.cfg.d_model as f64).sqrt();
        let mut blocks = Vec::with_capacity(self.cfg.n_layers);
        let mut tapes = Vec::new();
        let mut site = 0;
        for (l, bp) in self.params.blocks.iter().enumerate() {
            if let Some(ctx) = ctx {
                if self.cfg.fusion_at.get(site) == Some(&(l + 1)) {
                    let (out, tape) = fusion_forward(h.view(), ctx, &self.params.fusion[site])?;
                    h = out;
                    tapes.push(tape);
                    site += 1;
                }
            }
            let dropout = match dropout_rng.as_deref_mut() {
                Some(r) if self.cfg.dropout > 0.0 => Some((self.cfg.dropout, r)),
                _ => None,
            };
            let (out, cache) = block::forward(bp, h.view(), dropout);
            h = out;
            blocks.push(cache);
        }
        let (final_norm, lnf) = layer_norm_rows(h.view(), self.params.lnf_gamma.view(), self.params.lnf_beta.view(), LN_EPS);
        let logits = final_norm.dot(&self.params.w_out).dot(&self.label_table.t());
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite logits".into()));
        }
        Ok((
            logits,
            ForwardCache {
                blocks,
                fusion: tapes,
                lnf,
                final_norm,
            },
        ))
    }

    /// Accumulates parameter gradients for `d_logits` into `g`.
    pub(crate) fn backward(&self, cache: &ForwardCache, d_logits: &Array2<f64>, g: &mut ModelParams) -> Result<()> {
        let d_z = d_logits.dot(&self.label_table);
        g.w_out += &cache.final_norm.t().dot(&d_z);
        let d_norm = d_z.dot(&self.params.w_out.t());
        let (mut d_h, dg, db) = layer_norm_rows_backward(&cache.lnf, self.params.lnf_gamma.view(), d_norm.view());
        g.lnf_gamma += &dg;
        g.lnf_beta += &db;
        let mut site = cache.fusion.len();
        for l in (0..self.cfg.n_layers).rev() {
            d_h = block::backward(&self.params.blocks[l], &cache.blocks[l], &d_h, &mut g.blocks[l]);
            if site > 0 && self.cfg.fusion_at[site - 1] == l + 1 {
                site -= 1;
                let fg = fusion_backward(&cache.fusion[site], d_h.view())?;
                let gf = &mut g.fusion[site];
                gf.w_q += &fg.d_w_q;
                gf.w_v += &fg.d_w_v;
                gf.ln_gamma += &fg.d_ln_gamma;
                gf.ln_beta += &fg.d_ln_beta;
                d_h = fg.d_a;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(CKPT_MAGIC, CKPT_VERSION);
        let c = &self.cfg;
        w.u32(c.n_layers as u32);
        w.u32(c.d_model as u32);
        w.u32(c.ffn_dim as u32);
        w.u32(c.m as u32);
        w.f64(c.dropout);
        w.u64(c.seed);
        w.u32(c.fusion_at.len() as u32);
        for &s in &c.fusion_at {
            w.u32(s as u32);
        }
        w.u64(self.label_table.nrows() as u64);
        w.u64(self.label_table.ncols() as u64);
        w.f64s(self.label_table.as_slice().unwrap());
        let tensors = self.params.tensors();
        w.u64(tensors.len() as u64);
        for t in tensors {
            w.u64(t.len() as u64);
            w.f64s(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, CKPT_MAGIC, CKPT_VERSION, "checkpoint")?;
        let corrupt = |m: String| Error::Corruption(format!("checkpoint: {m}"));
        let n_layers = r.u32()? as usize;
        let d_model = r.u32()? as usize;
        let ffn_dim = r.u32()? as usize;
        let m = r.u32()? as usize;
        let dropout = r.f64()?;
        let seed = r.u64()?;
        let n_sites = r.u32()? as usize;
        r.expect_at_least(n_sites as u64, 4)?;
        let fusion_at = (0..n_sites).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let cfg = EncoderConfig {
            n_layers,
            d_model,
            ffn_dim,
            fusion_at,
            dropout,
            seed,
            m,
        };
        cfg.validate().map_err(|e| corrupt(e.to_string()))?;
        // guard against absurd sizes before allocating a fresh model
        let block_size = (4 * d_model as u64 * d_model as u64) + 2 * d_model as u64 * ffn_dim as u64;
        r.expect_at_least(block_size.saturating_mul(n_layers as u64), 8)?;
        let rows = r.len()?;
        let cols = r.len()?;
        r.expect_at_least((rows as u64).saturating_mul(cols as u64), 8)?;
        let table = Array2::from_shape_vec((rows, cols), r.f64s(rows * cols)?).map_err(|e| corrupt(e.to_string()))?;
        let mut model = Self::new(cfg, table).map_err(|e| corrupt(e.to_string()))?;
        let n_tensors = r.len()?;
        let mut slots = model.params.tensors_mut();
        if n_tensors != slots.len() {
            return Err(corrupt(format!("expected {} tensors, found {n_tensors}", slots.len())));
        }
        for (i, slot) in slots.iter_mut().enumerate() {
            let len = r.len()?;
            if len != slot.len() {
                return Err(corrupt(format!("tensor {i} has {len} values, expected {}", slot.len())));
            }
            slot.copy_from_slice(&r.f64s(len)?);
        }
        r.finish()?;
        if !model.params.all_finite() {
            return Err(Error::Data("checkpoint contains non-finite weights".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(|e| e.context(path.display().to_string()))
    }
}
