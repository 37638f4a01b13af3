//! Pre-LN self-attention + ReLU feed-forward block.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::fusion::{layer_norm_rows, layer_norm_rows_backward, LnCache};

pub(crate) const LN_EPS: f64 = 1e-5;
/// Scale of the attention-output and FFN-output projections relative to a
/// unit-variance init.
const RESIDUAL_INIT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w_1: Array2<f64>,
    pub b_1: Array1<f64>,
    pub w_2: Array2<f64>,
    pub b_2: Array1<f64>,
}

fn gaussian(shape: (usize, usize), scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

impl BlockParams {
    pub fn init(d: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        let sd = (1.0 / d as f64).sqrt();
        let sf = (1.0 / ffn as f64).sqrt();
        Self {
            ln1_gamma: Array1::ones(d),
            ln1_beta: Array1::zeros(d),
            w_q: gaussian((d, d), sd, rng),
            w_k: gaussian((d, d), sd, rng),
            w_v: gaussian((d, d), sd, rng),
            // residual branches start small so the stream stays close to its input
            w_o: gaussian((d, d), RESIDUAL_INIT * sd, rng),
            ln2_gamma: Array1::ones(d),
            ln2_beta: Array1::zeros(d),
            w_1: gaussian((d, ffn), sd, rng),
            b_1: Array1::zeros(ffn),
            w_2: gaussian((ffn, d), RESIDUAL_INIT * sf, rng),
            b_2: Array1::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Self {
            ln1_gamma: z1(&self.ln1_gamma),
            ln1_beta: z1(&self.ln1_beta),
            w_q: z2(&self.w_q),
            w_k: z2(&self.w_k),
            w_v: z2(&self.w_v),
            w_o: z2(&self.w_o),
            ln2_gamma: z1(&self.ln2_gamma),
            ln2_beta: z1(&self.ln2_beta),
            w_1: z2(&self.w_1),
            b_1: z1(&self.b_1),
            w_2: z2(&self.w_2),
            b_2: z1(&self.b_2),
        }
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 12] {
        [
            self.ln1_gamma.as_slice().unwrap(),
            self.ln1_beta.as_slice().unwrap(),
            self.w_q.as_slice().unwrap(),
            self.w_k.as_slice().unwrap(),
            self.w_v.as_slice().unwrap(),
            self.w_o.as_slice().unwrap(),
            self.ln2_gamma.as_slice().unwrap(),
            self.ln2_beta.as_slice().unwrap(),
            self.w_1.as_slice().unwrap(),
            self.b_1.as_slice().unwrap(),
            self.w_2.as_slice().unwrap(),
            self.b_2.as_slice().unwrap(),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 12] {
        [
            self.ln1_gamma.as_slice_mut().unwrap(),
            self.ln1_beta.as_slice_mut().unwrap(),
            self.w_q.as_slice_mut().unwrap(),
            self.w_k.as_slice_mut().unwrap(),
            self.w_v.as_slice_mut().unwrap(),
            self.w_o.as_slice_mut().unwrap(),
            self.ln2_gamma.as_slice_mut().unwrap(),
            self.ln2_beta.as_slice_mut().unwrap(),
            self.w_1.as_slice_mut().unwrap(),
            self.b_1.as_slice_mut().unwrap(),
            self.w_2.as_slice_mut().unwrap(),
            self.b_2.as_slice_mut().unwrap(),
        ]
    }
}

pub(crate) struct BlockCache {
    x: Array2<f64>,
    ln1: LnCache,
    n1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    o: Array2<f64>,
    ln2: LnCache,
    n2: Array2<f64>,
    h_pre: Array2<f64>,
    /// Post-ReLU (and post-dropout) hidden units.
    h: Array2<f64>,
    /// Inverted-dropout multipliers, when dropout was active.
    mask: Option<Array2<f64>>,
}

pub(crate) fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `dS` from `dP` for row-wise softmax weights `p`.
pub(crate) fn softmax_rows_backward(p: &Array2<f64>, d_p: &Array2<f64>) -> Array2<f64> {
    let mut d_s = p * d_p;
    for (mut row, pr) in d_s.rows_mut().into_iter().zip(p.rows()) {
        let dot = row.sum();
        row.iter_mut().zip(pr).for_each(|(g, &pi)| *g -= pi * dot);
    }
    d_s
}

pub(crate) fn forward(
    p: &BlockParams,
    x: ArrayView2<f64>,
    dropout: Option<(f64, &mut rand_chacha::ChaCha8Rng)>,
) -> (Array2<f64>, BlockCache) {
    let d = x.ncols() as f64;
    let (n1, ln1) = layer_norm_rows(x, p.ln1_gamma.view(), p.ln1_beta.view(), LN_EPS);
    let q = n1.dot(&p.w_q);
    let k = n1.dot(&p.w_k);
    let v = n1.dot(&p.w_v);
    let mut s = q.dot(&k.t()) / d.sqrt();
    softmax_rows(&mut s);
    let o = s.dot(&v);
    let x1 = &x + &o.dot(&p.w_o);
    let (n2, ln2) = layer_norm_rows(x1.view(), p.ln2_gamma.view(), p.ln2_beta.view(), LN_EPS);
    let h_pre = n2.dot(&p.w_1) + &p.b_1;
    let mut h = h_pre.mapv(|v| v.max(0.0));
    let mask = match dropout {
        Some((rate, rng)) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let m = Array2::from_shape_fn(h.raw_dim(), |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            h *= &m;
            Some(m)
        }
        _ => None,
    };
    let out = &x1 + &(h.dot(&p.w_2) + &p.b_2);
    let cache = BlockCache {
        x: x.to_owned(),
        ln1,
        n1,
        q,
        k,
        v,
        p: s,
        o,
        ln2,
        n2,
        h_pre,
        h,
        mask,
    };
    (out, cache)
}

/// Returns the gradient w.r.t. the block input; parameter gradients are
/// accumulated into `g`.
pub(crate) fn backward(p: &BlockParams, c: &BlockCache, d_out: &Array2<f64>, g: &mut BlockParams) -> Array2<f64> {
    let d = c.x.ncols() as f64;
    // feed-forward branch
    g.b_2 += &d_out.sum_axis(Axis(0));
    g.w_2 += &c.h.t().dot(d_out);
    let mut d_h = d_out.dot(&p.w_2.t());
    if let Some(m) = &c.mask {
        d_h *= m;
    }
    d_h.zip_mut_with(&c.h_pre, |gr, &z| {
        if z <= 0.0 {
            *gr = 0.0
        }
    });
    g.b_1 += &d_h.sum_axis(Axis(0));
    g.w_1 += &c.n2.t().dot(&d_h);
    let d_n2 = d_h.dot(&p.w_1.t());
    let (d_x1_ln, dg2, db2) = layer_norm_rows_backward(&c.ln2, p.ln2_gamma.view(), d_n2.view());
    g.ln2_gamma += &dg2;
    g.ln2_beta += &db2;
    let d_x1 = d_out + &d_x1_ln;

    // attention branch
    g.w_o += &c.o.t().dot(&d_x1);
    let d_o = d_x1.dot(&p.w_o.t());
    let d_p = d_o.dot(&c.v.t());
    let d_v = c.p.t().dot(&d_o);
    g.w_v += &c.n1.t().dot(&d_v);
    let d_s = softmax_rows_backward(&c.p, &d_p) / d.sqrt();
    let d_q = d_s.dot(&c.k);
    let d_k = d_s.t().dot(&c.q);
    g.w_q += &c.n1.t().dot(&d_q);
    g.w_k += &c.n1.t().dot(&d_k);
    let d_n1 = d_q.dot(&p.w_q.t()) + d_k.dot(&p.w_k.t()) + d_v.dot(&p.w_v.t());
    let (d_x_ln, dg1, db1) = layer_norm_rows_backward(&c.ln1, p.ln1_gamma.view(), d_n1.view());
    g.ln1_gamma += &dg1;
    g.ln1_beta += &db1;
    d_x1 + d_x_ln
}
