//! Optimized product quantisation.
//!
//! Training alternates two steps on a fixed sample `X` (n × d_key):
//!
//! 1. with the rotation `R` fixed, refine the per-subspace codebooks by
//!    Lloyd k-means on the rotated sample `XR`;
//! 2. with the codes fixed, replace `R` by the orthogonal Procrustes
//!    solution `U Vᵀ`, where `U Σ Vᵀ` is the thin SVD of `Xᵀ Ŷ` and `Ŷ` is
//!    the reconstruction of `XR` from its codes.
//!
//! The objective is the mean reconstruction error in the original space,
//! `‖x − R ĉ(xR)‖²`. Both steps are exact minimisers of it for the other
//! step's variables held fixed, so the recorded trace never increases.
//! The rotation starts from a PCA basis whose eigenvectors are dealt out
//! to subspaces so that each subspace receives a similar share of the
//! variance.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kmeans;
use crate::error::{Error, Result};

/// Centroids per subspace; codes are one byte per subspace.
pub const CODEBOOK_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpqParams {
    pub d_target: usize,
    pub n_subspaces: usize,
    /// Rotation/codebook alternations after the PCA initialisation.
    pub iters: usize,
    pub seed: u64,
    /// Lloyd steps used to fit the initial codebooks.
    pub init_kmeans_iters: usize,
    /// Lloyd steps per alternation.
    pub kmeans_iters: usize,
}

impl OpqParams {
    pub fn new(d_target: usize, n_subspaces: usize, iters: usize, seed: u64) -> Self {
        Self {
            d_target,
            n_subspaces,
            iters,
            seed,
            init_kmeans_iters: 15,
            kmeans_iters: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpqTransform {
    d_key: usize,
    d_target: usize,
    n_subspaces: usize,
    /// Row-major d_key × d_target with orthonormal columns.
    rotation: Vec<f64>,
    /// n_subspaces × CODEBOOK_SIZE × sub_dim.
    codebooks: Vec<f32>,
    /// Objective after initialisation, then after each alternation.
    objective_trace: Vec<f64>,
    /// Set when the training sample spans fewer than d_target directions
    /// and the basis had to be padded.
    degenerate: bool,
}

fn check_params(d_key: usize, p: &OpqParams) -> Result<()> {
    if p.d_target == 0 || p.d_target > d_key {
        return Err(Error::InvalidArgument(format!(
            "d_target must be in [1, {d_key}], got {}",
            p.d_target
        )));
    }
    if p.n_subspaces == 0 || p.d_target % p.n_subspaces != 0 {
        return Err(Error::InvalidArgument(format!(
            "n_subspaces {} must divide d_target {}",
            p.n_subspaces, p.d_target
        )));
    }
    Ok(())
}

/// PCA basis (d × d_target, row-major) with eigenvector columns grouped by
/// subspace, plus the degenerate flag.
fn pca_init(x: &[f64], n: usize, d: usize, p: &OpqParams) -> (Vec<f64>, bool) {
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in x.chunks_exact(d) {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += ci * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > 1e-10 * top.max(f64::MIN_POSITIVE))
        .count();
    let degenerate = rank < p.d_target;

    // Deal the leading eigenvectors to the subspace with the smallest
    // variance so far that still has room.
    let sub = p.d_target / p.n_subspaces;
    let mut load = vec![0.0f64; p.n_subspaces];
    let mut members: Vec<Vec<usize>> = vec![Vec::with_capacity(sub); p.n_subspaces];
    for &e in order.iter().take(p.d_target) {
        let s = (0..p.n_subspaces)
            .filter(|&s| members[s].len() < sub)
            .min_by(|&a, &b| load[a].total_cmp(&load[b]).then(a.cmp(&b)))
            .unwrap();
        load[s] += eig.eigenvalues[e].max(0.0);
        members[s].push(e);
    }
    let mut rotation = vec![0.0; d * p.d_target];
    for (col, &e) in members.iter().flatten().enumerate() {
        for row in 0..d {
            rotation[row * p.d_target + col] = eig.eigenvectors[(row, e)];
        }
    }
    (rotation, degenerate)
}

fn rotate_rows(x: &[f64], d: usize, rotation: &[f64], dt: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut out = vec![0.0; n * dt];
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(dt)) {
        for (i, &xi) in row.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let r = &rotation[i * dt..(i + 1) * dt];
            o.iter_mut().zip(r).for_each(|(acc, ri)| *acc += xi * ri);
        }
    }
    out
}

fn extract_subspace(y: &[f64], dt: usize, s: usize, sub: usize) -> Vec<f64> {
    y.chunks_exact(dt)
        .flat_map(|row| row[s * sub..(s + 1) * sub].iter().copied())
        .collect()
}

struct Trainer<'a> {
    x: &'a [f64],
    n: usize,
    d: usize,
    dt: usize,
    n_sub: usize,
    sub: usize,
    sq_norms: Vec<f64>,
}

impl Trainer<'_> {
    /// Mean of ‖x‖² − ‖xR‖² + ‖xR − ĉ‖² with nearest-centroid codes.
    /// Also returns the reconstruction of every rotated row.
    fn objective(&self, rotation: &[f64], codebooks: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let y = rotate_rows(self.x, self.d, rotation, self.dt);
        let mut recon = vec![0.0; self.n * self.dt];
        let mut total = 0.0;
        for i in 0..self.n {
            let row = &y[i * self.dt..(i + 1) * self.dt];
            // energy outside the target span; identically zero for a
            // full-width rotation, where it would only add rounding noise
            if self.dt < self.d {
                let proj_sq: f64 = row.iter().map(|v| v * v).sum();
                total += (self.sq_norms[i] - proj_sq).max(0.0);
            }
            for s in 0..self.n_sub {
                let part = &row[s * self.sub..(s + 1) * self.sub];
                let (c, dist) = kmeans::nearest(part, &codebooks[s], self.sub);
                total += dist;
                recon[i * self.dt + s * self.sub..i * self.dt + (s + 1) * self.sub]
                    .copy_from_slice(&codebooks[s][c * self.sub..(c + 1) * self.sub]);
            }
        }
        (total / self.n as f64, recon)
    }

    /// Lloyd steps per subspace; returns the reconstruction of the rotated
    /// sample under the final nearest-centroid assignment.
    fn refine_codebooks(&self, rotation: &[f64], codebooks: &mut [Vec<f64>], iters: usize) -> Vec<f64> {
        let y = rotate_rows(self.x, self.d, rotation, self.dt);
        let mut recon = vec![0.0; self.n * self.dt];
        for (s, cb) in codebooks.iter_mut().enumerate() {
            let part = extract_subspace(&y, self.dt, s, self.sub);
            let (assignment, _) = kmeans::lloyd(&part, self.sub, cb, iters);
            for (i, &c) in assignment.iter().enumerate() {
                let at = i * self.dt + s * self.sub;
                recon[at..at + self.sub].copy_from_slice(&cb[c * self.sub..(c + 1) * self.sub]);
            }
        }
        recon
    }

    /// Orthogonal Procrustes: argmax_R tr(Rᵀ Xᵀ Ŷ) over orthonormal columns.
    fn procrustes(&self, recon: &[f64]) -> Vec<f64> {
        let mut m = DMatrix::<f64>::zeros(self.d, self.dt);
        for i in 0..self.n {
            let xr = &self.x[i * self.d..(i + 1) * self.d];
            let yr = &recon[i * self.dt..(i + 1) * self.dt];
            for (a, &xa) in xr.iter().enumerate() {
                if xa == 0.0 {
                    continue;
                }
                for (b, &yb) in yr.iter().enumerate() {
                    m[(a, b)] += xa * yb;
                }
            }
        }
        let svd = m.svd(true, true);
        let r = svd.u.unwrap() * svd.v_t.unwrap();
        let mut out = vec![0.0; self.d * self.dt];
        for a in 0..self.d {
            for b in 0..self.dt {
                out[a * self.dt + b] = r[(a, b)];
            }
        }
        out
    }
}

/// Train an OPQ transform on a sample of keys (at least 256 of them).
pub fn train_opq(keys: &[Vec<f32>], params: &OpqParams) -> Result<OpqTransform> {
    let n = keys.len();
    if n < CODEBOOK_SIZE {
        return Err(Error::InvalidArgument(format!(
            "OPQ training needs at least {CODEBOOK_SIZE} samples, got {n}"
        )));
    }
    let d = keys[0].len();
    if keys.iter().any(|k| k.len() != d) {
        return Err(Error::Shape("training keys have mixed lengths".into()));
    }
    check_params(d, params)?;
    if keys.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("training keys contain non-finite values".into()));
    }
    let x: Vec<f64> = keys.iter().flatten().map(|&v| f64::from(v)).collect();
    let dt = params.d_target;
    let n_sub = params.n_subspaces;
    let sub = dt / n_sub;
    let trainer = Trainer {
        x: &x,
        n,
        d,
        dt,
        n_sub,
        sub,
        sq_norms: x.chunks_exact(d).map(|r| r.iter().map(|v| v * v).sum()).collect(),
    };

    let (mut rotation, degenerate) = pca_init(&x, n, d, params);
    if degenerate {
        log::warn!("OPQ training sample is rank-deficient; using a padded PCA basis");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let y0 = rotate_rows(&x, d, &rotation, dt);
    let mut codebooks: Vec<Vec<f64>> = (0..n_sub)
        .map(|s| {
            let part = extract_subspace(&y0, dt, s, sub);
            let mut cb = kmeans::kmeans_pp(&part, sub, CODEBOOK_SIZE, &mut rng);
            kmeans::lloyd(&part, sub, &mut cb, params.init_kmeans_iters);
            cb
        })
        .collect();

    let (mut obj, _) = trainer.objective(&rotation, &codebooks);
    let mut objective_trace = vec![obj];
    for it in 0..params.iters {
        // Each half-step cannot raise the objective in exact arithmetic; a
        // step that rounding pushes upward is discarded.
        let mut cand_books = codebooks.clone();
        let recon = trainer.refine_codebooks(&rotation, &mut cand_books, params.kmeans_iters);
        let cand_rot = trainer.procrustes(&recon);
        let (o_full, _) = trainer.objective(&cand_rot, &cand_books);
        if o_full <= obj {
            rotation = cand_rot;
            codebooks = cand_books;
            obj = o_full;
        } else {
            let (o_books, _) = trainer.objective(&rotation, &cand_books);
            if o_books <= obj {
                codebooks = cand_books;
                obj = o_books;
            } else {
                log::debug!("OPQ alternation {} rejected ({o_full:e} > {obj:e})", it + 1);
            }
        }
        log::debug!("OPQ alternation {}: objective {obj:.6}", it + 1);
        objective_trace.push(obj);
    }

    Ok(OpqTransform {
        d_key: d,
        d_target: dt,
        n_subspaces: n_sub,
        rotation,
        codebooks: codebooks.into_iter().flatten().map(|v| v as f32).collect(),
        objective_trace,
        degenerate,
    })
}

impl OpqTransform {
    pub(crate) fn from_parts(
        d_key: usize,
        d_target: usize,
        n_subspaces: usize,
        rotation: Vec<f64>,
        codebooks: Vec<f32>,
        objective_trace: Vec<f64>,
        degenerate: bool,
    ) -> Result<Self> {
        check_params(
            d_key,
            &OpqParams::new(d_target, n_subspaces, 0, 0),
        )?;
        if rotation.len() != d_key * d_target
            || codebooks.len() != n_subspaces * CODEBOOK_SIZE * (d_target / n_subspaces)
        {
            return Err(Error::Shape("OPQ parts have inconsistent sizes".into()));
        }
        Ok(Self {
            d_key,
            d_target,
            n_subspaces,
            rotation,
            codebooks,
            objective_trace,
            degenerate,
        })
    }

    pub fn d_key(&self) -> usize {
        self.d_key
    }

    pub fn d_target(&self) -> usize {
        self.d_target
    }

    pub fn n_subspaces(&self) -> usize {
        self.n_subspaces
    }

    pub fn sub_dim(&self) -> usize {
        self.d_target / self.n_subspaces
    }

    /// Row-major d_key × d_target.
    pub fn rotation(&self) -> &[f64] {
        &self.rotation
    }

    pub fn codebooks(&self) -> &[f32] {
        &self.codebooks
    }

    pub fn centroid(&self, subspace: usize, code: u8) -> &[f32] {
        let sub = self.sub_dim();
        let start = (subspace * CODEBOOK_SIZE + code as usize) * sub;
        &self.codebooks[start..start + sub]
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// max |RᵀR − I|.
    pub fn orthonormality_residual(&self) -> f64 {
        let (d, dt) = (self.d_key, self.d_target);
        let mut worst = 0.0f64;
        for a in 0..dt {
            for b in 0..dt {
                let dot: f64 = (0..d)
                    .map(|i| self.rotation[i * dt + a] * self.rotation[i * dt + b])
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    fn check_len(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.d_key {
            return Err(Error::Shape(format!(
                "vector length {} != d_key {}",
                v.len(),
                self.d_key
            )));
        }
        Ok(())
    }

    /// `v R` in double precision.
    pub fn rotate(&self, v: &[f32]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        let x: Vec<f64> = v.iter().map(|&a| f64::from(a)).collect();
        Ok(rotate_rows(&x, self.d_key, &self.rotation, self.d_target))
    }

    /// Nearest centroid id per subspace of the rotated key.
    pub fn encode(&self, key: &[f32]) -> Result<Vec<u8>> {
        let y = self.rotate(key)?;
        Ok(self.encode_rotated(&y))
    }

    pub(crate) fn encode_rotated(&self, y: &[f64]) -> Vec<u8> {
        let sub = self.sub_dim();
        (0..self.n_subspaces)
            .map(|s| {
                let part = &y[s * sub..(s + 1) * sub];
                let mut best = (0usize, f64::INFINITY);
                for c in 0..CODEBOOK_SIZE {
                    let d: f64 = part
                        .iter()
                        .zip(self.centroid(s, c as u8))
                        .map(|(a, &b)| (a - f64::from(b)).powi(2))
                        .sum();
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0 as u8
            })
            .collect()
    }

    /// Concatenated centroids selected by `code`, in the rotated space.
    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        code.iter()
            .enumerate()
            .flat_map(|(s, &c)| self.centroid(s, c).iter().copied())
            .collect()
    }
}

/// Per-query lookup tables for asymmetric distance computation.
#[derive(Debug, Clone)]
pub struct AdcTable {
    n_subspaces: usize,
    table: Vec<f32>,
}

impl AdcTable {
    pub fn new(t: &OpqTransform, query: &[f32]) -> Result<Self> {
        let y = t.rotate(query)?;
        let sub = t.sub_dim();
        let mut table = Vec::with_capacity(t.n_subspaces * CODEBOOK_SIZE);
        for s in 0..t.n_subspaces {
            let part = &y[s * sub..(s + 1) * sub];
            for c in 0..CODEBOOK_SIZE {
                let d: f64 = part
                    .iter()
                    .zip(t.centroid(s, c as u8))
                    .map(|(a, &b)| (a - f64::from(b)).powi(2))
                    .sum();
                table.push(d as f32);
            }
        }
        Ok(Self {
            n_subspaces: t.n_subspaces,
            table,
        })
    }

    /// Σ_s ‖rotate(query)_s − centroid_s(code_s)‖².
    #[inline]
    pub fn distance(&self, code: &[u8]) -> f32 {
        debug_assert_eq!(code.len(), self.n_subspaces);
        code.iter()
            .enumerate()
            .map(|(s, &c)| self.table[s * CODEBOOK_SIZE + c as usize])
            .sum()
    }
}

/// Approximate squared L2 between a raw query and a PQ code.
pub fn adc_distance(t: &OpqTransform, query: &[f32], code: &[u8]) -> Result<f32> {
    if code.len() != t.n_subspaces {
        return Err(Error::Shape(format!(
            "code length {} != n_subspaces {}",
            code.len(),
            t.n_subspaces
        )));
    }
    Ok(AdcTable::new(t, query)?.distance(code))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sample(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // anisotropic Gaussian so the rotation has something to do
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        (g * (1.0 + j as f64 * 0.2) + rng.random::<f64>() * 0.01) as f32
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn parameter_validation() {
        let keys = sample(300, 8, 1);
        assert!(train_opq(&keys[..100], &OpqParams::new(8, 2, 0, 0)).is_err());
        assert!(train_opq(&keys, &OpqParams::new(9, 3, 0, 0)).is_err());
        assert!(train_opq(&keys, &OpqParams::new(8, 3, 0, 0)).is_err());
    }

    #[test]
    fn iters_zero_is_the_pca_start() {
        let keys = sample(400, 8, 2);
        let p = OpqParams::new(8, 4, 0, 5);
        let t = train_opq(&keys, &p).unwrap();
        let x: Vec<f64> = keys.iter().flatten().map(|&v| f64::from(v)).collect();
        let (pca, degenerate) = pca_init(&x, keys.len(), 8, &p);
        assert_eq!(t.rotation(), &pca[..]);
        assert!(!degenerate && !t.is_degenerate());
        assert_eq!(t.objective_trace().len(), 1);
    }

    #[test]
    fn reduced_target_dimension() {
        let keys = sample(400, 12, 3);
        let t = train_opq(&keys, &OpqParams::new(6, 3, 3, 1)).unwrap();
        assert_eq!(t.rotation().len(), 12 * 6);
        assert!(t.orthonormality_residual() < 1e-6);
        let tr = t.objective_trace();
        assert!(tr.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn rank_deficient_sample_is_flagged() {
        // every key lies on a 2-d plane inside 8-d space
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let keys: Vec<Vec<f32>> = (0..300)
            .map(|_| {
                let (a, b): (f32, f32) = (rng.random(), rng.random());
                vec![a, b, a + b, 0.0, 0.0, a - b, 0.0, 0.0]
            })
            .collect();
        let t = train_opq(&keys, &OpqParams::new(8, 4, 2, 0)).unwrap();
        assert!(t.is_degenerate());
        assert!(t.orthonormality_residual() < 1e-6);
    }

    #[test]
    fn adc_zero_on_centroids_and_nonnegative() {
        let keys = sample(512, 8, 5);
        let t = train_opq(&keys, &OpqParams::new(8, 4, 1, 2)).unwrap();
        // Build a key whose rotated form is exactly a concatenation of
        // centroids: rotate the decoded code back with R (R is square here).
        let code = t.encode(&keys[17]).unwrap();
        let y = t.decode(&code);
        let mut key = vec![0.0f32; 8];
        for i in 0..8 {
            key[i] = (0..8)
                .map(|j| t.rotation()[i * 8 + j] * f64::from(y[j]))
                .sum::<f64>() as f32;
        }
        assert!(adc_distance(&t, &key, &code).unwrap().abs() < 1e-6);

        for k in keys.iter().take(50) {
            let other = t.encode(&keys[3]).unwrap();
            assert!(adc_distance(&t, k, &other).unwrap() >= 0.0);
        }
        assert!(adc_distance(&t, &keys[0], &[0u8; 3]).is_err());
    }
}
