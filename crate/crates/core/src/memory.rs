//! The external key/value memory.
//!
//! A memory is an ordered list of records, each pairing an audio-side key
//! vector with a text-side value vector and pointing back at the catalog
//! entry it was built from. Once built it is treated as an immutable asset:
//! models never write to it, and domain updates happen by building a new
//! memory or concatenating memories with [`merge_memories`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MEMORY_MAGIC: &[u8; 8] = b"KNNFMEM\0";
const MEMORY_VERSION: u32 = 1;

/// One line of a text catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub id: u64,
    pub text: String,
    pub tags: Vec<String>,
}

impl CatalogEntry {
    pub fn new(id: u64, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "catalog entry {id} has empty text"
            )));
        }
        Ok(Self {
            id,
            text,
            tags: Vec::new(),
        })
    }

    pub fn with_tags(mut self, tags: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.tags = tags.into_iter().map(Into::into).collect();
        self
    }
}

/// Parse a catalog: one entry per line, `text` or `text<TAB>tag1,tag2`.
///
/// Blank lines are skipped; entries are numbered from 0 in file order.
pub fn parse_catalog(src: &str) -> Result<Vec<CatalogEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in src.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (text, tags) = match line.split_once('\t') {
            Some((text, tags)) => (text, tags),
            None => (line, ""),
        };
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "line {}: empty catalog text",
                lineno + 1
            )));
        }
        let tags: Vec<String> = tags
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        entries.push(CatalogEntry::new(entries.len() as u64, text)?.with_tags(tags));
    }
    validate_catalog(&entries)?;
    Ok(entries)
}

pub fn read_catalog(path: &Path) -> Result<Vec<CatalogEntry>> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_catalog(&src).map_err(|e| e.context(path.display()))
}

/// Check catalog invariants: unique ids, non-blank text.
pub fn validate_catalog(entries: &[CatalogEntry]) -> Result<()> {
    let mut seen = HashSet::with_capacity(entries.len());
    for e in entries {
        if e.text.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "catalog entry {} has empty text",
                e.id
            )));
        }
        if !seen.insert(e.id) {
            return Err(Error::Conflict(format!("duplicate catalog id {}", e.id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRecord {
    pub id: u64,
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    pub entry_id: u64,
}

impl MemoryRecord {
    pub fn new(id: u64, key: Vec<f32>, value: Vec<f32>, entry_id: u64) -> Self {
        Self {
            id,
            key,
            value,
            entry_id,
        }
    }
}

/// Ordered key/value store with fixed dimensions.
#[derive(Debug, Clone)]
pub struct ExternalMemory {
    d_key: usize,
    d_value: usize,
    records: Vec<MemoryRecord>,
    provenance: String,
    positions: HashMap<u64, usize>,
}

impl PartialEq for ExternalMemory {
    fn eq(&self, other: &Self) -> bool {
        self.d_key == other.d_key
            && self.d_value == other.d_value
            && self.provenance == other.provenance
            && self.records == other.records
    }
}

/// Result of concatenating two memories.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub memory: ExternalMemory,
    /// Right-operand ids that collided with the left operand, mapped to
    /// their replacement ids in `memory`.
    pub remap: BTreeMap<u64, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryStats {
    pub count: usize,
    pub d_key: usize,
    pub d_value: usize,
    pub key_norm_mean: f64,
    pub key_norm_stddev: f64,
}

impl ExternalMemory {
    pub fn new(d_key: usize, d_value: usize) -> Result<Self> {
        if d_key == 0 || d_value == 0 {
            return Err(Error::InvalidArgument(format!(
                "memory dimensions must be positive, got d_key={d_key}, d_value={d_value}"
            )));
        }
        Ok(Self {
            d_key,
            d_value,
            records: Vec::new(),
            provenance: String::new(),
            positions: HashMap::new(),
        })
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn set_provenance(&mut self, provenance: impl Into<String>) {
        self.provenance = provenance.into();
    }

    pub fn d_key(&self) -> usize {
        self.d_key
    }

    pub fn d_value(&self) -> usize {
        self.d_value
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn get(&self, id: u64) -> Option<&MemoryRecord> {
        self.positions.get(&id).map(|&p| &self.records[p])
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.positions.get(&id).copied()
    }

    pub fn contains_id(&self, id: u64) -> bool {
        self.positions.contains_key(&id)
    }

    /// Largest record id, if any.
    pub fn max_id(&self) -> Option<u64> {
        self.records.iter().map(|r| r.id).max()
    }

    pub fn append(&mut self, rec: MemoryRecord) -> Result<()> {
        if rec.key.len() != self.d_key {
            return Err(Error::Shape(format!(
                "record {}: key length {} != d_key {}",
                rec.id,
                rec.key.len(),
                self.d_key
            )));
        }
        if rec.value.len() != self.d_value {
            return Err(Error::Shape(format!(
                "record {}: value length {} != d_value {}",
                rec.id,
                rec.value.len(),
                self.d_value
            )));
        }
        if self.positions.contains_key(&rec.id) {
            return Err(Error::Conflict(format!("duplicate record id {}", rec.id)));
        }
        if !rec.key.iter().chain(&rec.value).all(|x| x.is_finite()) {
            return Err(Error::Data(format!(
                "record {} has a non-finite component",
                rec.id
            )));
        }
        self.positions.insert(rec.id, self.records.len());
        self.records.push(rec);
        Ok(())
    }

    pub fn stats(&self) -> MemoryStats {
        let norms: Vec<f64> = self
            .records
            .iter()
            .map(|r| {
                r.key
                    .iter()
                    .map(|&x| f64::from(x) * f64::from(x))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let (mean, stddev) = if norms.is_empty() {
            (0.0, 0.0)
        } else {
            let n = norms.len() as f64;
            let mean = norms.iter().sum::<f64>() / n;
            let var = norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        MemoryStats {
            count: self.records.len(),
            d_key: self.d_key,
            d_value: self.d_value,
            key_norm_mean: mean,
            key_norm_stddev: stddev,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(MEMORY_MAGIC, MEMORY_VERSION);
        w.u32(self.d_key as u32);
        w.u32(self.d_value as u32);
        w.u64(self.records.len() as u64);
        w.str(&self.provenance);
        for r in &self.records {
            w.u64(r.id);
            w.u64(r.entry_id);
            w.f32s(&r.key);
            w.f32s(&r.value);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, MEMORY_MAGIC, MEMORY_VERSION, "memory file")?;
        let d_key = r.u32()? as usize;
        let d_value = r.u32()? as usize;
        let count = r.u64()?;
        let provenance = r.str()?;
        let mut mem = ExternalMemory::new(d_key, d_value)
            .map_err(|e| Error::Corruption(e.to_string()))?
            .with_provenance(provenance);
        let rec_size = 16 + 4 * (d_key as u64 + d_value as u64);
        r.expect_at_least(count, rec_size)?;
        mem.records.reserve(count as usize);
        for _ in 0..count {
            let id = r.u64()?;
            let entry_id = r.u64()?;
            let key = r.f32s(d_key)?;
            let value = r.f32s(d_value)?;
            mem.append(MemoryRecord::new(id, key, value, entry_id))?;
        }
        r.finish()?;
        Ok(mem)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(|e| e.context(path.display()))
    }
}

/// Concatenate two memories with identical dimensions.
///
/// Records of `a` keep their ids. Records of `b` keep theirs unless the id
/// is already taken, in which case they get fresh ids above every id in
/// either operand; the replacements are returned in `remap`.
pub fn merge_memories(a: &ExternalMemory, b: &ExternalMemory) -> Result<MergeOutcome> {
    if a.d_key != b.d_key || a.d_value != b.d_value {
        return Err(Error::Shape(format!(
            "cannot merge ({}, {}) memory with ({}, {}) memory",
            a.d_key, a.d_value, b.d_key, b.d_value
        )));
    }
    let mut next_id = a
        .max_id()
        .into_iter()
        .chain(b.max_id())
        .max()
        .map_or(0, |m| m + 1);
    let provenance = match (a.provenance.is_empty(), b.provenance.is_empty()) {
        (true, true) => String::new(),
        (false, true) => a.provenance.clone(),
        (true, false) => b.provenance.clone(),
        (false, false) => format!("{}\n+ {}", a.provenance, b.provenance),
    };
    let mut merged = a.clone().with_provenance(provenance);
    merged.records.reserve(b.len());
    let mut remap = BTreeMap::new();
    for rec in &b.records {
        let mut rec = rec.clone();
        if merged.contains_id(rec.id) {
            remap.insert(rec.id, next_id);
            rec.id = next_id;
            next_id += 1;
        }
        merged.append(rec)?;
    }
    Ok(MergeOutcome {
        memory: merged,
        remap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, d_key: usize, d_value: usize, seed: f32) -> MemoryRecord {
        MemoryRecord::new(
            id,
            (0..d_key).map(|i| seed + i as f32 * 0.5).collect(),
            (0..d_value).map(|i| seed - i as f32).collect(),
            id,
        )
    }

    fn filled(n: u64, first_id: u64) -> ExternalMemory {
        let mut m = ExternalMemory::new(4, 3).unwrap();
        for i in 0..n {
            m.append(rec(first_id + i, 4, 3, i as f32)).unwrap();
        }
        m
    }

    #[test]
    fn create_memory_dims() {
        let m = ExternalMemory::new(64, 300).unwrap();
        assert_eq!((m.d_key(), m.d_value(), m.len()), (64, 300, 0));
        let m = ExternalMemory::new(1, 1).unwrap();
        assert_eq!((m.d_key(), m.d_value()), (1, 1));
        assert!(matches!(
            ExternalMemory::new(0, 8),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn append_checks() {
        let mut m = ExternalMemory::new(64, 300).unwrap();
        m.append(rec(1, 64, 300, 0.0)).unwrap();
        assert_eq!(m.len(), 1);
        assert!(matches!(
            m.append(rec(2, 63, 300, 0.0)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            m.append(rec(1, 64, 300, 0.0)),
            Err(Error::Conflict(_))
        ));
        let mut bad = rec(3, 64, 300, 0.0);
        bad.value[7] = f32::NAN;
        assert!(matches!(m.append(bad), Err(Error::Data(_))));
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn merge_cardinality_and_identity() {
        let a = filled(10, 0);
        let b = filled(5, 100);
        let out = merge_memories(&a, &b).unwrap();
        assert_eq!(out.memory.len(), 15);
        assert!(out.remap.is_empty());

        let empty = ExternalMemory::new(4, 3).unwrap();
        let out = merge_memories(&a, &empty).unwrap();
        assert_eq!(out.memory, a);
        let out = merge_memories(&empty, &a).unwrap();
        assert_eq!(out.memory.records(), a.records());
    }

    #[test]
    fn merge_colliding_ids_remaps() {
        let a = filled(10, 0);
        let b = filled(5, 7); // ids 7..12 collide on 7, 8, 9
        let out = merge_memories(&a, &b).unwrap();
        let ids: HashSet<u64> = out.memory.records().iter().map(|r| r.id).collect();
        assert_eq!(ids.len(), 15);
        assert_eq!(out.remap.len(), 3);
        for (old, new) in &out.remap {
            assert!((7..10).contains(old));
            assert!(*new > 11);
            let moved = out.memory.get(*new).unwrap();
            let orig = b.get(*old).unwrap();
            assert_eq!(moved.key, orig.key);
            assert_eq!(moved.value, orig.value);
        }
    }

    #[test]
    fn merge_dim_mismatch() {
        let a = ExternalMemory::new(4, 3).unwrap();
        let b = ExternalMemory::new(4, 2).unwrap();
        assert!(matches!(merge_memories(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn stats_edge_cases() {
        let s = ExternalMemory::new(3, 1).unwrap().stats();
        assert_eq!(s.count, 0);
        assert_eq!(s.key_norm_mean, 0.0);
        assert_eq!(s.key_norm_stddev, 0.0);

        let mut m = ExternalMemory::new(3, 1).unwrap();
        m.append(MemoryRecord::new(0, vec![0.6, 0.8, 0.0], vec![1.0], 0))
            .unwrap();
        let s = m.stats();
        assert!((s.key_norm_mean - 1.0).abs() < 1e-7);
        assert_eq!(s.key_norm_stddev, 0.0);
    }

    #[test]
    fn catalog_parsing() {
        let cat = parse_catalog("hello\nworld\tsports, music\n\n  new york \t\n").unwrap();
        assert_eq!(cat.len(), 3);
        assert_eq!(cat[1].text, "world");
        assert_eq!(cat[1].tags, vec!["sports", "music"]);
        assert_eq!(cat[2].text, "new york");
        assert!(cat[2].tags.is_empty());
        assert_eq!(cat[2].id, 2);
        assert!(parse_catalog("ok\n \tdomain\n").is_err());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let bytes = filled(3, 0).to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            ExternalMemory::from_bytes(&wrong),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            ExternalMemory::from_bytes(&bytes[..bytes.len() - 9]),
            Err(Error::Corruption(_))
        ));
    }
}
