use std::collections::{BTreeMap, HashSet};

use knnfuse::memory::{merge_memories, ExternalMemory, MemoryRecord};
use knnfuse::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn memory_from(records: &[(u64, Vec<f32>, Vec<f32>)], d_key: usize, d_value: usize) -> ExternalMemory {
    let mut m = ExternalMemory::new(d_key, d_value).unwrap();
    for (id, k, v) in records {
        m.append(MemoryRecord::new(*id, k.clone(), v.clone(), *id)).unwrap();
    }
    m
}

fn arb_memory(d_key: usize, d_value: usize, max_len: usize) -> impl Strategy<Value = ExternalMemory> {
    let rec = (
        0u64..64,
        prop::collection::vec(-1e3f32..1e3, d_key),
        prop::collection::vec(-1e3f32..1e3, d_value),
    );
    (prop::collection::vec(rec, 0..max_len), "[a-z =;]{0,24}").prop_map(move |(recs, prov)| {
        let mut seen = HashSet::new();
        let recs: Vec<_> = recs.into_iter().filter(|r| seen.insert(r.0)).collect();
        memory_from(&recs, d_key, d_value).with_provenance(prov)
    })
}

/// Multiset of record contents, ignoring ids.
fn content(m: &ExternalMemory) -> BTreeMap<(Vec<u32>, Vec<u32>, u64), usize> {
    let mut out = BTreeMap::new();
    for r in m.records() {
        let k = r.key.iter().map(|v| v.to_bits()).collect();
        let v = r.value.iter().map(|v| v.to_bits()).collect();
        *out.entry((k, v, r.entry_id)).or_insert(0) += 1;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn persistence_round_trip_is_identity(m in arb_memory(3, 2, 40)) {
        let bytes = m.to_bytes();
        let back = ExternalMemory::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_bytes(), bytes);
        let ids: Vec<u64> = back.records().iter().map(|r| r.id).collect();
        let orig: Vec<u64> = m.records().iter().map(|r| r.id).collect();
        prop_assert_eq!(ids, orig);
    }

    #[test]
    fn merge_is_associative_up_to_ids(a in arb_memory(2, 1, 12), b in arb_memory(2, 1, 12), c in arb_memory(2, 1, 12)) {
        let left = merge_memories(&merge_memories(&a, &b).unwrap().memory, &c).unwrap().memory;
        let right = merge_memories(&a, &merge_memories(&b, &c).unwrap().memory).unwrap().memory;
        prop_assert_eq!(left.len(), a.len() + b.len() + c.len());
        prop_assert_eq!(content(&left), content(&right));
        let ids: HashSet<u64> = left.records().iter().map(|r| r.id).collect();
        prop_assert_eq!(ids.len(), left.len());
    }

    #[test]
    fn append_never_touches_earlier_records(m in arb_memory(4, 2, 20), key in prop::collection::vec(-5f32..5.0, 4)) {
        let digest = |m: &ExternalMemory| {
            let mut h = Sha256::new();
            for r in m.records() {
                h.update(r.id.to_le_bytes());
                r.key.iter().chain(&r.value).for_each(|v| h.update(v.to_le_bytes()));
            }
            h.finalize()
        };
        let before = digest(&m);
        let mut grown = m.clone();
        let id = m.max_id().map_or(0, |x| x + 1);
        grown.append(MemoryRecord::new(id, key, vec![0.0, 1.0], id)).unwrap();
        prop_assert_eq!(grown.len(), m.len() + 1);
        let prefix = memory_from(
            &grown.records()[..m.len()].iter().map(|r| (r.id, r.key.clone(), r.value.clone())).collect::<Vec<_>>(),
            4,
            2,
        );
        prop_assert_eq!(digest(&prefix), before);
    }
}

#[test]
fn colliding_merge_against_set_oracle() {
    let a = memory_from(&(0..10).map(|i| (i, vec![i as f32], vec![0.0])).collect::<Vec<_>>(), 1, 1);
    let b = memory_from(&(6..11).map(|i| (i, vec![-(i as f32)], vec![1.0])).collect::<Vec<_>>(), 1, 1);
    let out = merge_memories(&a, &b).unwrap();

    let a_ids: HashSet<u64> = a.records().iter().map(|r| r.id).collect();
    let b_ids: HashSet<u64> = b.records().iter().map(|r| r.id).collect();
    let collisions: HashSet<u64> = a_ids.intersection(&b_ids).copied().collect();
    let merged: HashSet<u64> = out.memory.records().iter().map(|r| r.id).collect();
    assert_eq!(merged.len(), 15);
    assert_eq!(out.remap.keys().copied().collect::<HashSet<_>>(), collisions);
    // every non-colliding id survives, every replacement is fresh
    assert!(a_ids.union(&b_ids).all(|id| merged.contains(id)));
    for new in out.remap.values() {
        assert!(!a_ids.contains(new) && !b_ids.contains(new));
    }
}

#[test]
fn stats_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut m = ExternalMemory::new(16, 1).unwrap();
    for i in 0..100 {
        let k: Vec<f32> = (0..16).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        m.append(MemoryRecord::new(i, k, vec![0.0], i)).unwrap();
    }
    let norms: Vec<f64> = m
        .records()
        .iter()
        .map(|r| r.key.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
        .collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let sd = (norms.iter().map(|n| (n - mean).powi(2)).sum::<f64>() / norms.len() as f64).sqrt();
    let s = m.stats();
    assert_eq!((s.count, s.d_key, s.d_value), (100, 16, 1));
    assert!((s.key_norm_mean - mean).abs() < 1e-9);
    assert!((s.key_norm_stddev - sd).abs() < 1e-9);

    let mut unit = ExternalMemory::new(3, 1).unwrap();
    unit.append(MemoryRecord::new(0, vec![0.0, 1.0, 0.0], vec![1.0], 0)).unwrap();
    assert!((unit.stats().key_norm_mean - 1.0).abs() < 1e-12);
}

#[test]
fn thousand_record_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = ExternalMemory::new(64, 300).unwrap().with_provenance("round trip");
    for i in 0..1000u64 {
        let k = (0..64).map(|_| rng.random::<f32>() - 0.5).collect();
        let v = (0..300).map(|_| rng.random::<f32>()).collect();
        m.append(MemoryRecord::new(i * 7, k, v, i)).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mem.bin");
    m.save(&path).unwrap();
    let back = ExternalMemory::load(&path).unwrap();
    assert_eq!(back, m);
    for (a, b) in back.records().iter().zip(m.records()) {
        assert!(a.key.iter().zip(&b.key).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(ExternalMemory::load(&path), Err(Error::Corruption(_))));
    let mut wrong = bytes.clone();
    wrong[..8].copy_from_slice(b"NOTAMEM\0");
    std::fs::write(&path, &wrong).unwrap();
    assert!(matches!(ExternalMemory::load(&path), Err(Error::Format(_))));
}
