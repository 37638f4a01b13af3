use std::collections::HashSet;
use std::time::Instant;

use super::{AnnIndex, ExactIndex, Neighbor};
use crate::error::{Error, Result};
use crate::memory::ExternalMemory;

/// Mean over queries of `|approx ∩ exact| / min(m, |exact|)`.
pub fn recall_from_results(approx: &[Vec<Neighbor>], exact: &[Vec<Neighbor>], m: usize) -> Result<f64> {
    if approx.is_empty() || approx.len() != exact.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty result sets (got {} approx, {} exact)",
            approx.len(),
            exact.len()
        )));
    }
    let mut total = 0.0;
    for (a, e) in approx.iter().zip(exact) {
        let truth: HashSet<u64> = e.iter().take(m).map(|n| n.record_id).collect();
        if truth.is_empty() {
            total += 1.0;
            continue;
        }
        let hits = a.iter().take(m).filter(|n| truth.contains(&n.record_id)).count();
        total += hits as f64 / truth.len() as f64;
    }
    Ok(total / approx.len() as f64)
}

/// Recall@m of `index` against the exact oracle over `mem`.
pub fn recall_at_k(
    index: &AnnIndex,
    mem: &ExternalMemory,
    queries: &[Vec<f32>],
    m: usize,
    ef_search: usize,
) -> Result<f64> {
    let exact = ExactIndex::new(mem);
    let truth = queries
        .iter()
        .map(|q| exact.knn(q, m))
        .collect::<Result<Vec<_>>>()?;
    let approx = queries
        .iter()
        .map(|q| index.knn(q, m, ef_search))
        .collect::<Result<Vec<_>>>()?;
    recall_from_results(&approx, &truth, m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub n_queries: usize,
    pub p50_latency_us: f64,
    pub p95_latency_us: f64,
    pub distance_computations_per_query: f64,
    /// Exact-scan baseline, when a memory was supplied.
    pub exact_p50_latency_us: Option<f64>,
    pub exact_p95_latency_us: Option<f64>,
    pub exact_distance_computations_per_query: Option<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn timed<F: FnMut(&[f32]) -> Result<()>>(queries: &[Vec<f32>], mut f: F) -> Result<(f64, f64)> {
    for q in queries.iter().take(10) {
        f(q)?;
    }
    let mut lat = Vec::with_capacity(queries.len());
    for q in queries {
        let t = Instant::now();
        f(q)?;
        lat.push(t.elapsed().as_secs_f64() * 1e6);
    }
    lat.sort_by(f64::total_cmp);
    Ok((percentile(&lat, 0.5), percentile(&lat, 0.95)))
}

/// Per-query latency percentiles and distance-computation counts, after a
/// short warmup. Passing `exact_over` adds the brute-force baseline.
pub fn bench_query(
    index: &AnnIndex,
    queries: &[Vec<f32>],
    m: usize,
    ef_search: usize,
    exact_over: Option<&ExternalMemory>,
) -> Result<BenchReport> {
    if queries.is_empty() {
        return Err(Error::NoData("no benchmark queries".into()));
    }
    let mut total_dc = 0usize;
    for q in queries {
        total_dc += index.knn_with_stats(q, m, ef_search)?.1.distance_computations;
    }
    let (p50, p95) = timed(queries, |q| index.knn(q, m, ef_search).map(|_| ()))?;
    let (ep50, ep95, edc) = match exact_over {
        Some(mem) => {
            let exact = ExactIndex::new(mem);
            let (a, b) = timed(queries, |q| exact.knn(q, m).map(|_| ()))?;
            (Some(a), Some(b), Some(mem.len() as f64))
        }
        None => (None, None, None),
    };
    Ok(BenchReport {
        n_queries: queries.len(),
        p50_latency_us: p50,
        p95_latency_us: p95,
        distance_computations_per_query: total_dc as f64 / queries.len() as f64,
        exact_p50_latency_us: ep50,
        exact_p95_latency_us: ep95,
        exact_distance_computations_per_query: edc,
    })
}
