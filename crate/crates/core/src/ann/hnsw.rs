//! Hierarchical navigable small-world graph.
//!
//! The graph only stores adjacency. Distances are supplied by the caller:
//! construction uses exact distances between rotated keys, queries use ADC
//! against PQ codes. Candidates are ordered by `(distance, rank key)`,
//! where the rank key is the record id, so every traversal is
//! deterministic.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnswParams {
    /// Max out-degree on upper layers; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Cand {
    pub dist: f32,
    pub rank: u64,
    pub node: u32,
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.rank.cmp(&other.rank))
    }
}

pub(crate) struct Visited {
    bits: Vec<u64>,
}

impl Visited {
    pub fn new(n: usize) -> Self {
        Self {
            bits: vec![0; n.div_ceil(64)],
        }
    }

    /// Marks `node`; true if it was not marked before.
    #[inline]
    pub fn insert(&mut self, node: u32) -> bool {
        let (w, b) = ((node / 64) as usize, node % 64);
        let fresh = self.bits[w] & (1 << b) == 0;
        self.bits[w] |= 1 << b;
        fresh
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HnswGraph {
    params: HnswParams,
    /// links[node][level] = out-neighbours.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
}

impl HnswGraph {
    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn entry_point(&self) -> Option<u32> {
        self.entry
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn level_of(&self, node: u32) -> usize {
        self.links[node as usize].len() - 1
    }

    pub fn neighbors(&self, node: u32, level: usize) -> &[u32] {
        self.links[node as usize]
            .get(level)
            .map_or(&[][..], Vec::as_slice)
    }

    fn capacity(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    pub(crate) fn from_parts(
        params: HnswParams,
        links: Vec<Vec<Vec<u32>>>,
        entry: Option<u32>,
    ) -> Option<Self> {
        let n = links.len();
        if links.iter().any(|l| l.is_empty() || l.len() > MAX_LEVEL + 1) {
            return None;
        }
        if links.iter().flatten().flatten().any(|&v| v as usize >= n) {
            return None;
        }
        let max_level = match entry {
            Some(e) if (e as usize) < n => links[e as usize].len() - 1,
            None if n == 0 => 0,
            _ => return None,
        };
        if links.iter().any(|l| l.len() - 1 > max_level) {
            return None;
        }
        Some(Self {
            params,
            links,
            entry,
            max_level,
        })
    }

    pub(crate) fn links(&self) -> &[Vec<Vec<u32>>] {
        &self.links
    }

    /// Insert nodes `0..n` in order. `dist(a, b)` is the construction
    /// metric and `rank[i]` the tie-break key of node `i`.
    pub fn build(n: usize, params: HnswParams, rank: &[u64], dist: impl Fn(u32, u32) -> f32) -> Self {
        assert_eq!(rank.len(), n);
        assert!(params.m >= 2, "HNSW needs m >= 2");
        let mut g = HnswGraph {
            params,
            links: Vec::with_capacity(n),
            entry: None,
            max_level: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.m as f64).ln();
        let ef_c = params.ef_construction.max(params.m);

        for node in 0..n as u32 {
            let u: f64 = rng.random();
            let level = ((-(1.0 - u).ln() * ml).floor() as usize).min(MAX_LEVEL);
            g.links.push(vec![Vec::new(); level + 1]);
            let Some(entry) = g.entry else {
                g.entry = Some(node);
                g.max_level = level;
                continue;
            };
            let mut to_node = |other: u32| dist(node, other);
            let mut eps = vec![Cand {
                dist: to_node(entry),
                rank: rank[entry as usize],
                node: entry,
            }];
            for l in (level + 1..=g.max_level).rev() {
                eps = g.search_layer(&eps, 1, l, rank, &mut to_node, None);
            }
            for l in (0..=level.min(g.max_level)).rev() {
                let found = g.search_layer(&eps, ef_c, l, rank, &mut to_node, None);
                let chosen = select_heuristic(&found, g.capacity(l), &dist);
                g.links[node as usize][l] = chosen.iter().map(|c| c.node).collect();
                for c in &chosen {
                    g.add_link(c.node, node, l, rank, &dist);
                }
                eps = found;
            }
            if level > g.max_level {
                g.max_level = level;
                g.entry = Some(node);
            }
        }
        g.repair_reachability(rank, &dist);
        g
    }

    fn add_link(&mut self, from: u32, to: u32, level: usize, rank: &[u64], dist: &impl Fn(u32, u32) -> f32) {
        let cap = self.capacity(level);
        let list = &mut self.links[from as usize][level];
        if list.contains(&to) {
            return;
        }
        list.push(to);
        if list.len() <= cap {
            return;
        }
        let mut cands: Vec<Cand> = list
            .iter()
            .map(|&v| Cand {
                dist: dist(from, v),
                rank: rank[v as usize],
                node: v,
            })
            .collect();
        cands.sort();
        let kept = select_heuristic(&cands, cap, dist);
        *list = kept.iter().map(|c| c.node).collect();
    }

    /// Beam search on one layer; returns up to `ef` candidates, ascending.
    pub(crate) fn search_layer(
        &self,
        entry_points: &[Cand],
        ef: usize,
        level: usize,
        rank: &[u64],
        dist: &mut impl FnMut(u32) -> f32,
        visited: Option<&mut Visited>,
    ) -> Vec<Cand> {
        let mut local;
        let visited = match visited {
            Some(v) => v,
            None => {
                local = Visited::new(self.links.len());
                &mut local
            }
        };
        let mut frontier: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        for &e in entry_points {
            if visited.insert(e.node) {
                frontier.push(Reverse(e));
                best.push(e);
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(Reverse(cur)) = frontier.pop() {
            if best.len() >= ef && cur > *best.peek().unwrap() {
                break;
            }
            for &nb in self.neighbors(cur.node, level) {
                if !visited.insert(nb) {
                    continue;
                }
                let c = Cand {
                    dist: dist(nb),
                    rank: rank[nb as usize],
                    node: nb,
                };
                if best.len() < ef || c < *best.peek().unwrap() {
                    frontier.push(Reverse(c));
                    best.push(c);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Nodes reachable from the entry point over layer-0 edges.
    pub fn reachable_at_layer0(&self) -> Vec<bool> {
        let mut seen = vec![false; self.links.len()];
        if let Some(e) = self.entry {
            self.mark_from(e, &mut seen);
        }
        seen
    }

    fn mark_from(&self, start: u32, seen: &mut [bool]) {
        if seen[start as usize] {
            return;
        }
        seen[start as usize] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &w in self.neighbors(v, 0) {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    queue.push_back(w);
                }
            }
        }
    }

    /// Give every node that pruning left without an inbound path an edge
    /// from a nearby reachable node.
    fn repair_reachability(&mut self, rank: &[u64], dist: &impl Fn(u32, u32) -> f32) {
        let Some(entry) = self.entry else { return };
        let mut seen = self.reachable_at_layer0();
        let cap = self.capacity(0);
        let ef = self.params.ef_construction.max(self.params.m);
        for u in 0..self.links.len() as u32 {
            if seen[u as usize] {
                continue;
            }
            let mut to_u = |other: u32| dist(u, other);
            let start = [Cand {
                dist: to_u(entry),
                rank: rank[entry as usize],
                node: entry,
            }];
            let found: Vec<Cand> = self
                .search_layer(&start, ef, 0, rank, &mut to_u, None)
                .into_iter()
                .filter(|c| seen[c.node as usize] && c.node != u)
                .collect();
            let host = found
                .iter()
                .find(|c| self.links[c.node as usize][0].len() < cap)
                .or(found.first())
                .map_or(entry, |c| c.node);
            let list = &mut self.links[host as usize][0];
            if list.len() >= cap {
                // Evict the host's farthest neighbour; it gets re-checked
                // below if that cut it off.
                let far = list
                    .iter()
                    .copied()
                    .enumerate()
                    .max_by(|a, b| {
                        dist(host, a.1)
                            .total_cmp(&dist(host, b.1))
                            .then(rank[a.1 as usize].cmp(&rank[b.1 as usize]))
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                list[far] = u;
            } else {
                list.push(u);
            }
            self.mark_from(u, &mut seen);
        }
        // Evictions can strand nodes that were counted as reachable.
        let reach = self.reachable_at_layer0();
        if reach.iter().any(|r| !r) {
            self.repair_reachability(rank, dist);
        }
    }
}

/// Keep a candidate only if no already-kept neighbour is closer to it than
/// the base node is.
fn select_heuristic(sorted: &[Cand], cap: usize, dist: &impl Fn(u32, u32) -> f32) -> Vec<Cand> {
    let mut kept: Vec<Cand> = Vec::with_capacity(cap);
    for &c in sorted {
        if kept.len() >= cap {
            break;
        }
        if kept.iter().all(|k| dist(c.node, k.node) >= c.dist) {
            kept.push(c);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(n: usize, seed: u64) -> Vec<[f32; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.random(), rng.random()]).collect()
    }

    fn build(pts: &[[f32; 2]], m: usize) -> HnswGraph {
        let rank: Vec<u64> = (0..pts.len() as u64).collect();
        HnswGraph::build(
            pts.len(),
            HnswParams { m, ef_construction: 40, seed: 1 },
            &rank,
            |a, b| {
                let (p, q) = (pts[a as usize], pts[b as usize]);
                (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
            },
        )
    }

    #[test]
    fn degree_bounds_and_reachability() {
        let pts = points(2000, 7);
        let g = build(&pts, 4);
        assert!(g.reachable_at_layer0().iter().all(|&r| r));
        for v in 0..g.len() as u32 {
            for l in 0..=g.level_of(v) {
                let cap = if l == 0 { 8 } else { 4 };
                assert!(g.neighbors(v, l).len() <= cap);
                assert!(!g.neighbors(v, l).contains(&v));
            }
        }
    }

    #[test]
    fn single_node_and_empty() {
        let g = build(&points(1, 0), 4);
        assert_eq!(g.entry_point(), Some(0));
        assert!(g.neighbors(0, 0).is_empty());
        let g = build(&[], 4);
        assert!(g.is_empty());
        assert_eq!(g.entry_point(), None);
    }

    #[test]
    fn deterministic_rebuild() {
        let pts = points(500, 3);
        assert_eq!(build(&pts, 6), build(&pts, 6));
    }
}
