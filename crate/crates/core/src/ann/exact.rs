use super::{Neighbor, Retriever};
use crate::error::{Error, Result};
use crate::memory::ExternalMemory;

/// Brute-force scan; the optimality oracle for everything approximate.
#[derive(Debug, Clone, Copy)]
pub struct ExactIndex<'a> {
    mem: &'a ExternalMemory,
}

impl<'a> ExactIndex<'a> {
    pub fn new(mem: &'a ExternalMemory) -> Self {
        Self { mem }
    }

    /// The `min(m, |E|)` records with smallest squared L2 distance to
    /// `query`, accumulated in double precision.
    pub fn knn(&self, query: &[f32], m: usize) -> Result<Vec<Neighbor>> {
        if query.len() != self.mem.d_key() {
            return Err(Error::Shape(format!(
                "query length {} != d_key {}",
                query.len(),
                self.mem.d_key()
            )));
        }
        if m == 0 {
            return Err(Error::InvalidArgument("m must be at least 1".into()));
        }
        let mut all: Vec<Neighbor> = self
            .mem
            .records()
            .iter()
            .map(|r| Neighbor {
                record_id: r.id,
                distance: r
                    .key
                    .iter()
                    .zip(query)
                    .map(|(&k, &q)| {
                        let d = f64::from(k) - f64::from(q);
                        d * d
                    })
                    .sum(),
            })
            .collect();
        let m = m.min(all.len());
        if m == 0 {
            return Ok(all);
        }
        if m < all.len() {
            all.select_nth_unstable_by(m - 1, Neighbor::cmp_rank);
            all.truncate(m);
        }
        all.sort_by(Neighbor::cmp_rank);
        Ok(all)
    }
}

impl Retriever for ExactIndex<'_> {
    fn memory(&self) -> &ExternalMemory {
        self.mem
    }

    fn search(&self, query: &[f32], m: usize) -> Result<Vec<Neighbor>> {
        self.knn(query, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryRecord;

    fn mem(keys: &[[f32; 2]]) -> ExternalMemory {
        let mut m = ExternalMemory::new(2, 1).unwrap();
        for (i, k) in keys.iter().enumerate() {
            m.append(MemoryRecord::new(i as u64, k.to_vec(), vec![0.0], i as u64))
                .unwrap();
        }
        m
    }

    #[test]
    fn hand_computed_example() {
        let m = mem(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let res = ExactIndex::new(&m).knn(&[0.9, 0.1], 2).unwrap();
        assert_eq!(res.len(), 2);
        assert_eq!(res[0].record_id, 1);
        assert!((res[0].distance - 0.02).abs() < 1e-6);
        assert_eq!(res[1].record_id, 0);
        assert!((res[1].distance - 0.82).abs() < 1e-6);
    }

    #[test]
    fn exact_hit_and_overflow() {
        let m = mem(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let idx = ExactIndex::new(&m);
        let res = idx.knn(&[0.0, 1.0], 1).unwrap();
        assert_eq!((res[0].record_id, res[0].distance), (2, 0.0));
        let res = idx.knn(&[5.0, 5.0], 10).unwrap();
        assert_eq!(res.len(), 3);
        assert!(res.windows(2).all(|w| w[0].cmp_rank(&w[1]).is_lt()));
    }

    #[test]
    fn ties_break_by_id_and_empty_memory() {
        let m = mem(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]);
        let res = ExactIndex::new(&m).knn(&[0.0, 0.0], 3).unwrap();
        let ids: Vec<u64> = res.iter().map(|n| n.record_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);

        let empty = ExternalMemory::new(2, 1).unwrap();
        assert!(ExactIndex::new(&empty).knn(&[0.0, 0.0], 4).unwrap().is_empty());
        assert!(ExactIndex::new(&empty).knn(&[0.0], 4).is_err());
    }
}
