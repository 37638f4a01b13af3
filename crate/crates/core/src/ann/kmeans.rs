//! Plain Lloyd k-means over flat row-major `f64` data.

use rand::Rng;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its distance.
pub(crate) fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    if dim == 1 {
        let p = point[0];
        for (c, &v) in centroids.iter().enumerate() {
            let d = (p - v) * (p - v);
            if d < best.1 {
                best = (c, d);
            }
        }
        return best;
    }
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding.
pub(crate) fn kmeans_pp(data: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        let newest = centroids[start..].to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &newest));
        }
    }
    centroids
}

pub(crate) fn assign(data: &[f64], dim: usize, centroids: &[f64], out: &mut [usize]) -> f64 {
    let mut sse = 0.0;
    for (i, p) in data.chunks_exact(dim).enumerate() {
        let (c, d) = nearest(p, centroids, dim);
        out[i] = c;
        sse += d;
    }
    sse
}

/// Move each centroid to the mean of its members. Empty clusters keep
/// their previous position, so the objective never increases.
pub(crate) fn update(data: &[f64], dim: usize, assignment: &[usize], centroids: &mut [f64]) {
    let k = centroids.len() / dim;
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &c) in data.chunks_exact(dim).zip(assignment) {
        counts[c] += 1;
        sums[c * dim..(c + 1) * dim]
            .iter_mut()
            .zip(p)
            .for_each(|(s, x)| *s += x);
    }
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for j in 0..dim {
                centroids[c * dim + j] = sums[c * dim + j] * inv;
            }
        }
    }
}

/// `iters` Lloyd steps starting from `centroids`; returns the final
/// assignment and its SSE.
pub(crate) fn lloyd(
    data: &[f64],
    dim: usize,
    centroids: &mut [f64],
    iters: usize,
) -> (Vec<usize>, f64) {
    let n = data.len() / dim;
    let mut assignment = vec![0usize; n];
    let mut sse = assign(data, dim, centroids, &mut assignment);
    for _ in 0..iters {
        update(data, dim, &assignment, centroids);
        let next = assign(data, dim, centroids, &mut assignment);
        let converged = next >= sse;
        sse = next;
        if converged {
            break;
        }
    }
    (assignment, sse)
}
