//! KNN fusion layer.
//!
//! For frames `A` (T × d_model) and a retrieved context `(K_c, V_c)`:
//!
//! ```text
//! F(A) = A + LN(ReLU(softmax((A W_q) K_cᵀ / √d_key) (V_c W_v)))
//! ```
//!
//! Everything runs in `f64`. Gradients flow into `A`, `W_q`, `W_v` and the
//! LayerNorm parameters; the context itself is a constant.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ann::Retriever;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// d_model × d_key
    pub w_q: Array2<f64>,
    /// d_value × d_model
    pub w_v: Array2<f64>,
    pub ln_gamma: Array1<f64>,
    pub ln_beta: Array1<f64>,
    pub ln_eps: f64,
    /// Neighbours retrieved per frame.
    pub m: usize,
}

impl FusionParams {
    /// Small random projections, unit gamma, zero beta.
    pub fn init(d_model: usize, d_key: usize, d_value: usize, m: usize, rng: &mut impl Rng) -> Self {
        let sq = (1.0 / d_model as f64).sqrt();
        let sv = (1.0 / d_value as f64).sqrt();
        Self {
            w_q: Array2::from_shape_fn((d_model, d_key), |_| sq * rng.sample::<f64, _>(StandardNormal)),
            w_v: Array2::from_shape_fn((d_value, d_model), |_| sv * rng.sample::<f64, _>(StandardNormal)),
            ln_gamma: Array1::ones(d_model),
            ln_beta: Array1::zeros(d_model),
            ln_eps: 1e-5,
            m,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_key(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn d_value(&self) -> usize {
        self.w_v.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.w_v.ncols() != d || self.ln_gamma.len() != d || self.ln_beta.len() != d {
            return Err(Error::Shape(format!(
                "fusion params disagree on d_model: W_q {:?}, W_v {:?}, gamma {}, beta {}",
                self.w_q.dim(),
                self.w_v.dim(),
                self.ln_gamma.len(),
                self.ln_beta.len()
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidArgument("fusion m must be ≥ 1".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::InvalidArgument(format!("ln_eps must be > 0, got {}", self.ln_eps)));
        }
        let finite = self.w_q.iter().chain(&self.w_v).chain(&self.ln_gamma).chain(&self.ln_beta);
        if !finite.into_iter().all(|v| v.is_finite()) {
            return Err(Error::Data("fusion params contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Retrieved keys and values, one row per distinct record.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionContext {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    pub record_ids: Vec<u64>,
}

impl FusionContext {
    pub fn empty(d_key: usize, d_value: usize) -> Self {
        Self {
            keys: Array2::zeros((0, d_key)),
            values: Array2::zeros((0, d_value)),
            record_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    /// Rows reordered by `perm` (`perm[i]` is the source row of row `i`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            keys: self.keys.select(Axis(0), perm),
            values: self.values.select(Axis(0), perm),
            record_ids: perm.iter().map(|&i| self.record_ids[i]).collect(),
        }
    }
}

/// Union of the per-frame top-`m` neighbours, deduplicated by record id.
/// Rows appear in frame order, then by distance within a frame.
pub fn gather_context(frames: ArrayView2<f64>, index: &dyn Retriever, m: usize) -> Result<FusionContext> {
    let mem = index.memory();
    if frames.ncols() != mem.d_key() {
        return Err(Error::Shape(format!(
            "frames have dimension {}, memory keys have {}",
            frames.ncols(),
            mem.d_key()
        )));
    }
    if mem.is_empty() {
        return Ok(FusionContext::empty(mem.d_key(), mem.d_value()));
    }
    let mut seen = HashSet::new();
    let mut ids = Vec::new();
    let mut query = vec![0f32; frames.ncols()];
    for row in frames.rows() {
        query.iter_mut().zip(row).for_each(|(q, &v)| *q = v as f32);
        for n in index.search(&query, m)? {
            if seen.insert(n.record_id) {
                ids.push(n.record_id);
            }
        }
    }
    let mut keys = Array2::zeros((ids.len(), mem.d_key()));
    let mut values = Array2::zeros((ids.len(), mem.d_value()));
    for (i, id) in ids.iter().enumerate() {
        let rec = mem
            .get(*id)
            .ok_or_else(|| Error::Lookup(format!("retriever returned unknown record {id}")))?;
        keys.row_mut(i).iter_mut().zip(&rec.key).for_each(|(k, &v)| *k = v as f64);
        values.row_mut(i).iter_mut().zip(&rec.value).for_each(|(k, &v)| *k = v as f64);
    }
    Ok(FusionContext {
        keys,
        values,
        record_ids: ids,
    })
}

/// Row-wise LayerNorm with population variance.
pub fn layer_norm(x: ArrayView1<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>, eps: f64) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    let mut out = Array1::zeros(x.len());
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
    }
    out
}

/// Cached LayerNorm state for one matrix.
#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// LayerNorm over each row of `x`.
pub fn layer_norm_rows(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut inv_std = Array1::zeros(t);
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[i] = inv;
        xhat.row_mut(i).iter_mut().zip(row).for_each(|(h, v)| *h = (v - mean) * inv);
    }
    let out = &xhat * &gamma + &beta;
    (out, LnCache { xhat, inv_std })
}

/// Returns (dx, d_gamma, d_beta).
pub fn layer_norm_rows_backward(
    cache: &LnCache,
    gamma: ArrayView1<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = gamma.len() as f64;
    let d_gamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let d_beta = dy.sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let h = cache.xhat.row(i);
        let mean_g = g.sum() / d;
        let mean_gh = g.dot(&h) / d;
        let inv = cache.inv_std[i];
        dx.row_mut(i)
            .iter_mut()
            .zip(g.iter().zip(h))
            .for_each(|(o, (gi, hi))| *o = inv * (gi - mean_g - hi * mean_gh));
    }
    (dx, d_gamma, d_beta)
}

/// Intermediates of one forward call.
#[derive(Debug, Clone)]
pub struct FusionTape {
    a: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    w_q: Array2<f64>,
    w_v: Array2<f64>,
    gamma: Array1<f64>,
    /// Row-stochastic attention weights, T × n_ctx.
    weights: Array2<f64>,
    /// V_c W_v, n_ctx × d_model.
    projected_values: Array2<f64>,
    /// Attention output before the ReLU.
    pre_relu: Array2<f64>,
    ln: LnCache,
}

impl FusionTape {
    pub fn attention_weights(&self) -> &Array2<f64> {
        &self.weights
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub d_a: Array2<f64>,
    pub d_w_q: Array2<f64>,
    pub d_w_v: Array2<f64>,
    pub d_ln_gamma: Array1<f64>,
    pub d_ln_beta: Array1<f64>,
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn fusion_forward(a: ArrayView2<f64>, ctx: &FusionContext, p: &FusionParams) -> Result<(Array2<f64>, FusionTape)> {
    p.validate()?;
    let (t, d_model) = a.dim();
    if d_model != p.d_model() {
        return Err(Error::Shape(format!("frames have d_model {d_model}, params expect {}", p.d_model())));
    }
    if ctx.keys.nrows() != ctx.values.nrows() || ctx.keys.nrows() != ctx.record_ids.len() {
        return Err(Error::Shape("context keys, values and ids are misaligned".into()));
    }
    if ctx.keys.ncols() != p.d_key() || ctx.values.ncols() != p.d_value() {
        return Err(Error::Shape(format!(
            "context is {}/{}-dimensional, params expect d_key {} and d_value {}",
            ctx.keys.ncols(),
            ctx.values.ncols(),
            p.d_key(),
            p.d_value()
        )));
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("non-finite frame embedding".into()));
    }
    if !ctx.keys.iter().chain(&ctx.values).all(|v| v.is_finite()) {
        return Err(Error::Data("non-finite context vector".into()));
    }

    let n = ctx.len();
    let (weights, projected_values, pre_relu) = if n == 0 {
        (Array2::zeros((t, 0)), Array2::zeros((0, d_model)), Array2::zeros((t, d_model)))
    } else {
        let q = a.dot(&p.w_q);
        let mut s = q.dot(&ctx.keys.t()) / (p.d_key() as f64).sqrt();
        softmax_rows(&mut s);
        let u = ctx.values.dot(&p.w_v);
        let z = s.dot(&u);
        (s, u, z)
    };
    let relu = pre_relu.mapv(|v| v.max(0.0));
    let (normed, ln) = layer_norm_rows(relu.view(), p.ln_gamma.view(), p.ln_beta.view(), p.ln_eps);
    let out = &a + &normed;
    let tape = FusionTape {
        a: a.to_owned(),
        keys: ctx.keys.clone(),
        values: ctx.values.clone(),
        w_q: p.w_q.clone(),
        w_v: p.w_v.clone(),
        gamma: p.ln_gamma.clone(),
        weights,
        projected_values,
        pre_relu,
        ln,
    };
    Ok((out, tape))
}

pub fn fusion_backward(tape: &FusionTape, d_out: ArrayView2<f64>) -> Result<FusionGrads> {
    if d_out.dim() != tape.a.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?}, forward output was {:?}",
            d_out.dim(),
            tape.a.dim()
        )));
    }
    let (d_relu, d_ln_gamma, d_ln_beta) = layer_norm_rows_backward(&tape.ln, tape.gamma.view(), d_out);
    let mut d_a = d_out.to_owned();
    let mut d_w_q = Array2::zeros(tape.w_q.raw_dim());
    let mut d_w_v = Array2::zeros(tape.w_v.raw_dim());
    if tape.keys.nrows() > 0 {
        let mut d_z = d_relu;
        d_z.zip_mut_with(&tape.pre_relu, |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        let d_p = d_z.dot(&tape.projected_values.t());
        let d_u = tape.weights.t().dot(&d_z);
        d_w_v = tape.values.t().dot(&d_u);
        // softmax Jacobian, row by row
        let mut d_s = &tape.weights * &d_p;
        for (mut row, p) in d_s.rows_mut().into_iter().zip(tape.weights.rows()) {
            let dot = row.sum();
            row.iter_mut().zip(p).for_each(|(g, &pi)| *g -= pi * dot);
        }
        let d_q = d_s.dot(&tape.keys) / (tape.keys.ncols() as f64).sqrt();
        d_w_q = tape.a.t().dot(&d_q);
        d_a += &d_q.dot(&tape.w_q.t());
    }
    Ok(FusionGrads {
        d_a,
        d_w_q,
        d_w_v,
        d_ln_gamma,
        d_ln_beta,
    })
}

/// The gradient groups checked by [`gradcheck`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradGroup {
    A,
    WQ,
    WV,
    LnGamma,
    LnBeta,
}

impl GradGroup {
    pub const ALL: [GradGroup; 5] = [Self::A, Self::WQ, Self::WV, Self::LnGamma, Self::LnBeta];

    pub fn name(self) -> &'static str {
        match self {
            Self::A => "dA",
            Self::WQ => "dW_q",
            Self::WV => "dW_v",
            Self::LnGamma => "d_ln_gamma",
            Self::LnBeta => "d_ln_beta",
        }
    }

    /// Accepts the gradient name (`dW_q`) or the parameter name (`W_q`).
    pub fn parse(s: &str) -> Option<Self> {
        let bare = |g: &Self| match g {
            Self::A => "A",
            Self::WQ => "W_q",
            Self::WV => "W_v",
            Self::LnGamma => "ln_gamma",
            Self::LnBeta => "ln_beta",
        };
        Self::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s) || bare(g).eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradcheckShape {
    pub frames: usize,
    pub n_ctx: usize,
    pub d_model: usize,
    pub d_key: usize,
    pub d_value: usize,
}

/// Largest d_model (and other dims) the checker accepts.
pub const GRADCHECK_MAX_DIM: usize = 16;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

impl GradcheckShape {
    /// Random small shape: |A| ≤ 4, n_ctx ≤ 6, dims ≤ 8.
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            frames: rng.random_range(1..=4),
            n_ctx: rng.random_range(1..=6),
            d_model: rng.random_range(2..=8),
            d_key: rng.random_range(1..=8),
            d_value: rng.random_range(1..=8),
        }
    }

    fn check(&self) -> Result<()> {
        let dims = [self.d_model, self.d_key, self.d_value];
        if self.frames == 0 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("gradcheck shape has a zero dimension: {self:?}")));
        }
        if dims.iter().chain([&self.frames, &self.n_ctx]).any(|&d| d > GRADCHECK_MAX_DIM) {
            return Err(Error::InvalidArgument(format!(
                "gradcheck is limited to dimensions ≤ {GRADCHECK_MAX_DIM}, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub shape: GradcheckShape,
    /// Max relative error per group, in [`GradGroup::ALL`] order.
    pub errors: Vec<(GradGroup, f64)>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.errors.iter().all(|e| e.1 < GRADCHECK_TOLERANCE)
    }

    pub fn failing(&self) -> Vec<GradGroup> {
        self.errors.iter().filter(|e| e.1 >= GRADCHECK_TOLERANCE).map(|e| e.0).collect()
    }
}

/// `max|a − n| / max(‖a‖∞, ‖n‖∞)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn gaussian(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

/// Compare analytic gradients of `⟨G, F(A)⟩` for a random upstream `G`
/// against central differences. `corrupt` perturbs one analytic group
/// before comparison, as a negative control.
pub fn gradcheck(shape: GradcheckShape, seed: u64, corrupt: Option<GradGroup>) -> Result<GradcheckReport> {
    shape.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let GradcheckShape {
        frames,
        n_ctx,
        d_model,
        d_key,
        d_value,
    } = shape;
    let a = gaussian((frames, d_model), &mut rng);
    let ctx = FusionContext {
        keys: gaussian((n_ctx, d_key), &mut rng),
        values: gaussian((n_ctx, d_value), &mut rng),
        record_ids: (0..n_ctx as u64).collect(),
    };
    let mut p = FusionParams::init(d_model, d_key, d_value, 1, &mut rng);
    p.ln_gamma = Array1::from_shape_fn(d_model, |_| 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal));
    p.ln_beta = Array1::from_shape_fn(d_model, |_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    let upstream = gaussian((frames, d_model), &mut rng);

    let (_, tape) = fusion_forward(a.view(), &ctx, &p)?;
    let mut grads = fusion_backward(&tape, upstream.view())?;
    if let Some(g) = corrupt {
        let target: &mut [f64] = match g {
            GradGroup::A => grads.d_a.as_slice_mut().unwrap(),
            GradGroup::WQ => grads.d_w_q.as_slice_mut().unwrap(),
            GradGroup::WV => grads.d_w_v.as_slice_mut().unwrap(),
            GradGroup::LnGamma => grads.d_ln_gamma.as_slice_mut().unwrap(),
            GradGroup::LnBeta => grads.d_ln_beta.as_slice_mut().unwrap(),
        };
        target[0] += 1.0 + target[0].abs();
    }

    let loss = |a: &Array2<f64>, p: &FusionParams| -> f64 {
        let (out, _) = fusion_forward(a.view(), &ctx, p).expect("shapes already validated");
        (&out * &upstream).sum()
    };
    let h = GRADCHECK_STEP;
    let mut errors = Vec::with_capacity(5);
    for group in GradGroup::ALL {
        let len = match group {
            GradGroup::A => a.len(),
            GradGroup::WQ => p.w_q.len(),
            GradGroup::WV => p.w_v.len(),
            GradGroup::LnGamma | GradGroup::LnBeta => d_model,
        };
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let eval = |delta: f64| {
                let mut a2 = a.clone();
                let mut p2 = p.clone();
                let slot = match group {
                    GradGroup::A => &mut a2.as_slice_mut().unwrap()[i],
                    GradGroup::WQ => &mut p2.w_q.as_slice_mut().unwrap()[i],
                    GradGroup::WV => &mut p2.w_v.as_slice_mut().unwrap()[i],
                    GradGroup::LnGamma => &mut p2.ln_gamma[i],
                    GradGroup::LnBeta => &mut p2.ln_beta[i],
                };
                *slot += delta;
                loss(&a2, &p2)
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        let analytic: Vec<f64> = match group {
            GradGroup::A => grads.d_a.iter().copied().collect(),
            GradGroup::WQ => grads.d_w_q.iter().copied().collect(),
            GradGroup::WV => grads.d_w_v.iter().copied().collect(),
            GradGroup::LnGamma => grads.d_ln_gamma.to_vec(),
            GradGroup::LnBeta => grads.d_ln_beta.to_vec(),
        };
        errors.push((group, relative_error(&analytic, &numeric)));
    }
    Ok(GradcheckReport { shape, errors })
}
