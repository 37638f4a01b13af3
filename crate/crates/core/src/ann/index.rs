use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::hnsw::{Cand, HnswGraph, HnswParams, Visited};
use super::kmeans;
use super::opq::{train_opq, AdcTable, OpqParams, OpqTransform, CODEBOOK_SIZE};
use super::{sq_l2_f32, Neighbor, Retriever};
use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::memory::ExternalMemory;

const INDEX_MAGIC: &[u8; 8] = b"KNNFIDX\0";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnParams {
    pub d_target: usize,
    pub n_subspaces: usize,
    /// HNSW max degree (2m on layer 0).
    pub m: usize,
    pub ef_construction: usize,
    /// Coarse k-means centroids; the nearest one's representative record
    /// seeds every layer-0 search. 0 disables it.
    pub n_centroids: usize,
    pub seed: u64,
    pub opq_iters: usize,
    /// Max records sampled for OPQ and coarse training.
    pub train_sample: usize,
}

impl AnnParams {
    /// Defaults for a given key width: full-width rotation, 2-d
    /// subspaces, M=16, ef_construction=200, 2048 coarse centroids.
    pub fn for_dim(d_key: usize) -> Self {
        let d_target = d_key;
        let n_subspaces = if d_target % 2 == 0 { d_target / 2 } else { d_target };
        Self {
            d_target,
            n_subspaces,
            m: 16,
            ef_construction: 200,
            n_centroids: 2048,
            seed: 0,
            opq_iters: 10,
            train_sample: 20_000,
        }
    }

    fn hnsw(&self) -> HnswParams {
        HnswParams {
            m: self.m,
            ef_construction: self.ef_construction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Full-vector distance evaluations: ADC lookups plus coarse-centroid
    /// comparisons. Table construction is not counted.
    pub distance_computations: usize,
}

/// OPQ codes plus an HNSW graph over one memory's records.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    params: AnnParams,
    opq: OpqTransform,
    ids: Vec<u64>,
    codes: Vec<u8>,
    coarse: Vec<f32>,
    coarse_rep: Vec<u32>,
    graph: HnswGraph,
}

impl AnnIndex {
    /// Train OPQ on (a sample of) the memory's keys, then index it.
    ///
    /// Memories smaller than the 256-entry codebook are cycled to fill the
    /// training sample; the resulting transform is flagged degenerate.
    pub fn build(mem: &ExternalMemory, params: &AnnParams) -> Result<Self> {
        if mem.is_empty() {
            return Err(Error::InvalidArgument("cannot build an index over an empty memory".into()));
        }
        let sample_keys = training_sample(mem, params.train_sample, params.seed);
        let opq = train_opq(
            &sample_keys,
            &OpqParams::new(params.d_target, params.n_subspaces, params.opq_iters, params.seed),
        )?;
        Self::build_with_transform(mem, opq, params)
    }

    /// Index a memory with an already-trained transform. Empty memories
    /// give an empty graph.
    pub fn build_with_transform(mem: &ExternalMemory, opq: OpqTransform, params: &AnnParams) -> Result<Self> {
        if mem.d_key() != opq.d_key() {
            return Err(Error::Shape(format!(
                "memory d_key {} != transform d_key {}",
                mem.d_key(),
                opq.d_key()
            )));
        }
        let mut params = *params;
        params.d_target = opq.d_target();
        params.n_subspaces = opq.n_subspaces();
        let dt = opq.d_target();
        let n = mem.len();

        let mut rotated = Vec::with_capacity(n * dt);
        let mut codes = Vec::with_capacity(n * opq.n_subspaces());
        for r in mem.records() {
            let y = opq.rotate(&r.key)?;
            codes.extend(opq.encode_rotated(&y));
            rotated.extend(y.iter().map(|&v| v as f32));
        }
        let ids: Vec<u64> = mem.records().iter().map(|r| r.id).collect();
        let row = |i: u32| &rotated[i as usize * dt..(i as usize + 1) * dt];

        let (coarse, coarse_rep) = coarse_quantizer(&rotated, dt, &params);
        let graph = HnswGraph::build(n, params.hnsw(), &ids, |a, b| sq_l2_f32(row(a), row(b)));
        Ok(Self {
            params,
            opq,
            ids,
            codes,
            coarse,
            coarse_rep,
            graph,
        })
    }

    pub fn params(&self) -> &AnnParams {
        &self.params
    }

    pub fn transform(&self) -> &OpqTransform {
        &self.opq
    }

    pub fn graph(&self) -> &HnswGraph {
        &self.graph
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn d_key(&self) -> usize {
        self.opq.d_key()
    }

    pub fn record_ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse_rep.len()
    }

    pub fn code(&self, pos: usize) -> &[u8] {
        let s = self.opq.n_subspaces();
        &self.codes[pos * s..(pos + 1) * s]
    }

    pub fn knn(&self, query: &[f32], m: usize, ef_search: usize) -> Result<Vec<Neighbor>> {
        Ok(self.knn_with_stats(query, m, ef_search)?.0)
    }

    /// Approximate top-m by ADC distance. `ef_search` is raised to `m`
    /// when smaller.
    pub fn knn_with_stats(
        &self,
        query: &[f32],
        m: usize,
        ef_search: usize,
    ) -> Result<(Vec<Neighbor>, SearchStats)> {
        if query.len() != self.d_key() {
            return Err(Error::Shape(format!(
                "query length {} != d_key {}",
                query.len(),
                self.d_key()
            )));
        }
        if m == 0 {
            return Err(Error::InvalidArgument("m must be at least 1".into()));
        }
        let mut stats = SearchStats::default();
        let Some(entry) = self.graph.entry_point() else {
            return Ok((Vec::new(), stats));
        };
        let table = AdcTable::new(&self.opq, query)?;
        let mut count = 0usize;
        let mut dist = |node: u32| {
            count += 1;
            table.distance(self.code(node as usize))
        };
        let cand = |node: u32, d: f32| Cand {
            dist: d,
            rank: self.ids[node as usize],
            node,
        };

        let mut eps = vec![cand(entry, dist(entry))];
        for level in (1..=self.graph.max_level()).rev() {
            eps = self.graph.search_layer(&eps, 1, level, &self.ids, &mut dist, None);
        }
        if !self.coarse_rep.is_empty() {
            let y: Vec<f32> = self.opq.rotate(query)?.iter().map(|&v| v as f32).collect();
            let dt = self.opq.d_target();
            let (best, _) = self
                .coarse
                .chunks_exact(dt)
                .map(|c| sq_l2_f32(&y, c))
                .enumerate()
                .fold((0, f32::INFINITY), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc });
            stats.distance_computations += self.coarse_rep.len();
            let rep = self.coarse_rep[best];
            if eps.iter().all(|c| c.node != rep) {
                eps.push(cand(rep, dist(rep)));
            }
        }
        let ef = ef_search.max(m);
        let mut visited = Visited::new(self.len());
        let found = self
            .graph
            .search_layer(&eps, ef, 0, &self.ids, &mut dist, Some(&mut visited));
        stats.distance_computations += count;
        let out = found
            .into_iter()
            .take(m)
            .map(|c| Neighbor {
                record_id: self.ids[c.node as usize],
                distance: f64::from(c.dist),
            })
            .collect();
        Ok((out, stats))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut w = ByteWriter::new(INDEX_MAGIC, INDEX_VERSION);
        for v in [
            p.d_target,
            p.n_subspaces,
            p.m,
            p.ef_construction,
            p.n_centroids,
            p.opq_iters,
            p.train_sample,
        ] {
            w.u64(v as u64);
        }
        w.u64(p.seed);

        let t = &self.opq;
        w.u64(t.d_key() as u64);
        w.u8(u8::from(t.is_degenerate()));
        w.f64s(t.rotation());
        w.f32s(t.codebooks());
        w.u64(t.objective_trace().len() as u64);
        w.f64s(t.objective_trace());

        w.u64(self.ids.len() as u64);
        for &id in &self.ids {
            w.u64(id);
        }
        w.bytes(&self.codes);

        w.u64(self.coarse_rep.len() as u64);
        w.f32s(&self.coarse);
        for &r in &self.coarse_rep {
            w.u32(r);
        }

        w.u64(self.graph.entry_point().map_or(u64::MAX, u64::from));
        for node_links in self.graph.links() {
            w.u8((node_links.len() - 1) as u8);
            for list in node_links {
                w.u32(list.len() as u32);
                for &v in list {
                    w.u32(v);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Corruption(format!("index file: {m}"));
        let mut r = ByteReader::open(bytes, INDEX_MAGIC, INDEX_VERSION, "index file")?;
        let mut field = || -> Result<usize> { r.len() };
        let d_target = field()?;
        let n_subspaces = field()?;
        let m = field()?;
        let ef_construction = field()?;
        let n_centroids = field()?;
        let opq_iters = field()?;
        let train_sample = field()?;
        let seed = r.u64()?;
        let params = AnnParams {
            d_target,
            n_subspaces,
            m,
            ef_construction,
            n_centroids,
            seed,
            opq_iters,
            train_sample,
        };
        if m < 2 {
            return Err(bad("HNSW degree below 2"));
        }

        let d_key = r.len()?;
        if d_key == 0 || d_target == 0 || d_target > d_key || n_subspaces == 0 || d_target % n_subspaces != 0 {
            return Err(bad("inconsistent dimensions"));
        }
        let degenerate = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(bad("bad flag byte")),
        };
        let rot_len = d_key.checked_mul(d_target).ok_or_else(|| bad("dimension overflow"))?;
        let rotation = r.f64s(rot_len)?;
        let codebooks = r.f32s(n_subspaces * CODEBOOK_SIZE * (d_target / n_subspaces))?;
        let trace_len = r.len()?;
        let trace = r.f64s(trace_len)?;
        let opq = OpqTransform::from_parts(d_key, d_target, n_subspaces, rotation, codebooks, trace, degenerate)
            .map_err(|e| bad(&e.to_string()))?;

        let n = r.len()?;
        if n > u32::MAX as usize {
            return Err(bad("too many records"));
        }
        r.expect_at_least(n as u64, 8 + n_subspaces as u64)?;
        let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let codes = r.bytes(n * n_subspaces)?.to_vec();

        let k = r.len()?;
        if k > n {
            return Err(bad("more coarse centroids than records"));
        }
        let coarse = r.f32s(k.checked_mul(d_target).ok_or_else(|| bad("size overflow"))?)?;
        r.expect_at_least(k as u64, 4)?;
        let coarse_rep = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if coarse_rep.iter().any(|&v| v as usize >= n) {
            return Err(bad("coarse representative out of range"));
        }

        let entry = match r.u64()? {
            u64::MAX => None,
            e if e < n as u64 => Some(e as u32),
            _ => return Err(bad("entry point out of range")),
        };
        r.expect_at_least(n as u64, 5)?;
        let mut links = Vec::with_capacity(n);
        for _ in 0..n {
            let levels = r.u8()? as usize + 1;
            let mut node_links = Vec::with_capacity(levels);
            for _ in 0..levels {
                let cnt = r.u32()? as usize;
                r.expect_at_least(cnt as u64, 4)?;
                node_links.push((0..cnt).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
            }
            links.push(node_links);
        }
        r.finish()?;
        let graph = HnswGraph::from_parts(params.hnsw(), links, entry).ok_or_else(|| bad("invalid graph"))?;
        Ok(Self {
            params,
            opq,
            ids,
            codes,
            coarse,
            coarse_rep,
            graph,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(|e| e.context(path.display()))
    }
}

fn training_sample(mem: &ExternalMemory, max: usize, seed: u64) -> Vec<Vec<f32>> {
    let n = mem.len();
    let keys = |i: usize| mem.records()[i].key.clone();
    if n < CODEBOOK_SIZE {
        return (0..CODEBOOK_SIZE).map(|i| keys(i % n)).collect();
    }
    if n <= max.max(CODEBOOK_SIZE) {
        return (0..n).map(keys).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut picked = sample(&mut rng, n, max.max(CODEBOOK_SIZE)).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(keys).collect()
}

/// k-means over (a sample of) the rotated keys, and for each centroid the
/// nearest record.
fn coarse_quantizer(rotated: &[f32], dt: usize, params: &AnnParams) -> (Vec<f32>, Vec<u32>) {
    let n = rotated.len() / dt;
    let k = params.n_centroids.min(n);
    if k == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0xc0a5);
    let train_n = n.min(params.train_sample.max(k));
    let mut rows: Vec<usize> = if train_n < n {
        sample(&mut rng, n, train_n).into_vec()
    } else {
        (0..n).collect()
    };
    rows.sort_unstable();
    let data: Vec<f64> = rows
        .iter()
        .flat_map(|&i| rotated[i * dt..(i + 1) * dt].iter().map(|&v| f64::from(v)))
        .collect();
    let mut centroids = kmeans::kmeans_pp(&data, dt, k, &mut rng);
    kmeans::lloyd(&data, dt, &mut centroids, 5);
    let centroids: Vec<f32> = centroids.into_iter().map(|v| v as f32).collect();

    let mut best = vec![(f32::INFINITY, 0u32); k];
    for (i, row) in rotated.chunks_exact(dt).enumerate() {
        for (c, centroid) in centroids.chunks_exact(dt).enumerate() {
            let d = sq_l2_f32(row, centroid);
            if d < best[c].0 {
                best[c] = (d, i as u32);
            }
        }
    }
    (centroids, best.into_iter().map(|(_, i)| i).collect())
}

/// Adapter that answers queries from an [`AnnIndex`] built over `mem`.
#[derive(Debug, Clone, Copy)]
pub struct AnnSearcher<'a> {
    index: &'a AnnIndex,
    mem: &'a ExternalMemory,
    ef_search: usize,
}

impl<'a> AnnSearcher<'a> {
    pub fn new(index: &'a AnnIndex, mem: &'a ExternalMemory, ef_search: usize) -> Result<Self> {
        if index.d_key() != mem.d_key() {
            return Err(Error::Shape(format!(
                "index d_key {} != memory d_key {}",
                index.d_key(),
                mem.d_key()
            )));
        }
        let same = index.len() == mem.len()
            && index.record_ids().iter().zip(mem.records()).all(|(a, r)| *a == r.id);
        if !same {
            return Err(Error::Consistency("index was not built over this memory".into()));
        }
        Ok(Self {
            index,
            mem,
            ef_search,
        })
    }
}

impl Retriever for AnnSearcher<'_> {
    fn memory(&self) -> &ExternalMemory {
        self.mem
    }

    fn search(&self, query: &[f32], m: usize) -> Result<Vec<Neighbor>> {
        self.index.knn(query, m, self.ef_search)
    }
}
