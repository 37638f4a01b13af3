//! Nearest-neighbour retrieval over memory keys.
//!
//! [`ExactIndex`] is the brute-force oracle. [`AnnIndex`] is the
//! approximate stack: an OPQ rotation, 8-bit product-quantisation codes
//! scored by asymmetric distance computation, and an HNSW graph over the
//! records, with a coarse k-means quantiser supplying an extra search
//! entry point. All distances are squared L2 and ties are broken by
//! ascending record id.

mod bench;
mod exact;
mod hnsw;
mod index;
mod kmeans;
mod opq;

use std::cmp::Ordering;

pub use bench::{bench_query, recall_at_k, recall_from_results, BenchReport};
pub use exact::ExactIndex;
pub use hnsw::{HnswGraph, HnswParams};
pub use index::{AnnIndex, AnnParams, AnnSearcher, SearchStats};
pub use opq::{adc_distance, train_opq, AdcTable, OpqParams, OpqTransform, CODEBOOK_SIZE};

use crate::error::Result;
use crate::memory::ExternalMemory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub record_id: u64,
    /// Squared L2, exact or ADC-approximate depending on the source.
    pub distance: f64,
}

impl Neighbor {
    pub fn cmp_rank(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.record_id.cmp(&other.record_id))
    }
}

/// Anything that can answer top-m queries over a memory's keys.
pub trait Retriever: Sync {
    fn memory(&self) -> &ExternalMemory;
    fn search(&self, query: &[f32], m: usize) -> Result<Vec<Neighbor>>;
}

pub(crate) fn sq_l2_f32(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
