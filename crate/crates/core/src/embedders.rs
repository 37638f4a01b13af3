//! Key and value embedders for catalog entries.
//!
//! Keys stand in for "what the entry sounds like to the encoder". There is
//! no speech synthesis here: [`AudioKeyEmbedder`] simulates a frame
//! sequence per character from seeded hashes of character n-grams, the
//! whole token, and the position within the token, perturbs it with a
//! per-voice gain and bias, and mean-pools the frames into a key. The same
//! frame generator feeds the toy encoder task, so utterance frames and
//! memory keys live in the same space.
//!
//! Values stand in for semantic text embeddings: a trainable one-hot style
//! table, a pretrained `token v1 v2 ...` vector table, or vectors imported
//! per entry id from a file produced elsewhere.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::memory::{validate_catalog, CatalogEntry, ExternalMemory, MemoryRecord};

// Relative weights of the frame feature components.
const WORD_WEIGHT: f64 = 1.0;
const NGRAM_WEIGHT: f64 = 0.5;
const POSITION_WEIGHT: f64 = 0.3;
const JITTER_WEIGHT: f64 = 0.15;
const VOICE_GAIN_SCALE: f64 = 0.15;
const VOICE_BIAS_SCALE: f64 = 0.25;
const POSITION_BUCKETS: usize = 4;
const MAX_NGRAM: usize = 3;

/// Seeded standard-normal vector addressed by an arbitrary byte tag.
pub(crate) fn hashed_gaussian(seed: u64, tag: &[u8], dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag);
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn tag(parts: &[&[u8]]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in parts {
        out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        out.extend_from_slice(p);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyEmbedderConfig {
    pub d_key: usize,
    pub n_voices: usize,
    pub seed: u64,
    pub frames_per_char: usize,
}

impl Default for KeyEmbedderConfig {
    fn default() -> Self {
        Self {
            d_key: 64,
            n_voices: 10,
            seed: 0,
            frames_per_char: 2,
        }
    }
}

impl KeyEmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_key == 0 || self.n_voices == 0 || self.frames_per_char == 0 {
            return Err(Error::InvalidArgument(format!(
                "key embedder needs d_key, n_voices, frames_per_char >= 1 (got {}, {}, {})",
                self.d_key, self.n_voices, self.frames_per_char
            )));
        }
        Ok(())
    }
}

/// Deterministic audio-proxy frame generator and key embedder.
#[derive(Debug, Clone)]
pub struct AudioKeyEmbedder {
    cfg: KeyEmbedderConfig,
}

impl AudioKeyEmbedder {
    pub fn new(cfg: KeyEmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &KeyEmbedderConfig {
        &self.cfg
    }

    fn check(&self, text: &str, voice: usize) -> Result<()> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty text".into()));
        }
        if voice >= self.cfg.n_voices {
            return Err(Error::InvalidArgument(format!(
                "voice {voice} out of range [0, {})",
                self.cfg.n_voices
            )));
        }
        Ok(())
    }

    fn component(&self, parts: &[&[u8]]) -> Vec<f64> {
        hashed_gaussian(self.cfg.seed, &tag(parts), self.cfg.d_key)
    }

    /// Simulated frame sequence, `frames_per_char` frames per character.
    pub fn frames(&self, text: &str, voice: usize) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .frames_f64(text, voice)?
            .into_iter()
            .map(|f| f.into_iter().map(|x| x as f32).collect())
            .collect())
    }

    fn frames_f64(&self, text: &str, voice: usize) -> Result<Vec<Vec<f64>>> {
        self.check(text, voice)?;
        let d = self.cfg.d_key;
        let chars: Vec<char> = text.chars().collect();
        let mut padded = Vec::with_capacity(chars.len() + 2);
        padded.push('^');
        padded.extend_from_slice(&chars);
        padded.push('$');

        let voice_bytes = (voice as u64).to_le_bytes();
        let gain: Vec<f64> = self
            .component(&[b"voice-gain", &voice_bytes])
            .into_iter()
            .map(|g| 1.0 + VOICE_GAIN_SCALE * g)
            .collect();
        let bias: Vec<f64> = self
            .component(&[b"voice-bias", &voice_bytes])
            .into_iter()
            .map(|b| VOICE_BIAS_SCALE * b)
            .collect();
        let word = self.component(&[b"word", text.as_bytes()]);
        let scale = 1.0 / (d as f64).sqrt();

        let mut frames = Vec::with_capacity(chars.len() * self.cfg.frames_per_char);
        for p in 0..chars.len() {
            // Shared by every sub-frame at this character.
            let mut base: Vec<f64> = word.iter().map(|w| WORD_WEIGHT * w).collect();
            let end = p + 1; // index of chars[p] inside `padded`
            for n in 1..=MAX_NGRAM {
                if n > end + 1 {
                    break;
                }
                let gram: String = padded[end + 1 - n..=end].iter().collect();
                let v = self.component(&[b"ngram", gram.as_bytes()]);
                base.iter_mut().zip(&v).for_each(|(b, x)| *b += NGRAM_WEIGHT * x);
            }
            let bucket = (POSITION_BUCKETS * p / chars.len()) as u64;
            let pos = self.component(&[b"position", &bucket.to_le_bytes()]);
            base.iter_mut().zip(&pos).for_each(|(b, x)| *b += POSITION_WEIGHT * x);

            for f in 0..self.cfg.frames_per_char {
                let jitter = self.component(&[
                    b"jitter",
                    text.as_bytes(),
                    &(p as u64).to_le_bytes(),
                    &(f as u64).to_le_bytes(),
                    &voice_bytes,
                ]);
                let frame = (0..d)
                    .map(|i| {
                        let raw = base[i] + JITTER_WEIGHT * jitter[i];
                        (gain[i] * raw + bias[i]) * scale
                    })
                    .collect();
                frames.push(frame);
            }
        }
        Ok(frames)
    }

    /// Mean-pooled frame sequence for `text` spoken by `voice`.
    pub fn key(&self, text: &str, voice: usize) -> Result<Vec<f32>> {
        let frames = self.frames_f64(text, voice)?;
        let n = frames.len() as f64;
        let mut acc = vec![0.0f64; self.cfg.d_key];
        for f in &frames {
            acc.iter_mut().zip(f).for_each(|(a, x)| *a += x);
        }
        Ok(acc.into_iter().map(|x| (x / n) as f32).collect())
    }
}

/// Convenience wrapper over [`AudioKeyEmbedder::key`].
pub fn synth_audio_key(text: &str, voice: usize, cfg: &KeyEmbedderConfig) -> Result<Vec<f32>> {
    AudioKeyEmbedder::new(*cfg)?.key(text, voice)
}

/// Rows of a learned lookup table, one per distinct catalog text.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotTable {
    rows: Vec<Vec<f32>>,
    assigned: HashMap<String, usize>,
}

impl OneHotTable {
    /// Table of `table_size` rows initialised from N(0, 0.02²), with rows
    /// assigned to the catalog's distinct texts in order of appearance.
    pub fn for_catalog(
        catalog: &[CatalogEntry],
        table_size: usize,
        d_value: usize,
        seed: u64,
    ) -> Result<Self> {
        if table_size == 0 || d_value == 0 {
            return Err(Error::InvalidArgument(
                "one-hot table needs positive size and width".into(),
            ));
        }
        let mut assigned = HashMap::new();
        for e in catalog {
            let next = assigned.len();
            assigned.entry(e.text.clone()).or_insert(next);
        }
        if assigned.len() > table_size {
            return Err(Error::InvalidArgument(format!(
                "catalog has {} distinct entries but the one-hot table holds {table_size}",
                assigned.len()
            )));
        }
        let rows = (0..table_size)
            .map(|r| {
                hashed_gaussian(seed, &tag(&[b"onehot-row", &(r as u64).to_le_bytes()]), d_value)
                    .into_iter()
                    .map(|x| (0.02 * x) as f32)
                    .collect()
            })
            .collect();
        Ok(Self { rows, assigned })
    }

    pub fn table_size(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row_index(&self, text: &str) -> Option<usize> {
        self.assigned.get(text).copied()
    }

    pub fn rows(&self) -> &[Vec<f32>] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.rows
    }
}

/// Token vectors in the conventional `token v1 v2 ...` text format.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl VectorTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("vector table dim must be positive".into()));
        }
        Ok(Self {
            dim,
            vectors: HashMap::new(),
        })
    }

    pub fn insert(&mut self, token: impl Into<String>, v: Vec<f32>) -> Result<()> {
        let token = token.into();
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector for {token:?} has length {} (table dim {})",
                v.len(),
                self.dim
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Data(format!("vector for {token:?} is not finite")));
        }
        self.vectors.insert(token, v);
        Ok(())
    }

    /// Seeded unit-norm random vectors for the given tokens; a stand-in for
    /// a real pretrained table in tests and the synthetic task.
    pub fn synthetic<'a>(
        tokens: impl IntoIterator<Item = &'a str>,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut table = Self::new(dim)?;
        for t in tokens {
            let t = t.to_lowercase();
            let g = hashed_gaussian(seed, &tag(&[b"value-token", t.as_bytes()]), dim);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            table.insert(t, g.iter().map(|x| (x / norm) as f32).collect())?;
        }
        Ok(table)
    }

    pub fn parse(src: &str) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (lineno, line) in src.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let v: Vec<f32> = fields
                .map(|f| {
                    f.parse::<f32>().map_err(|_| {
                        Error::Data(format!("line {}: bad number {f:?}", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            let expected = *dim.get_or_insert(v.len());
            if v.is_empty() || v.len() != expected {
                return Err(Error::Shape(format!(
                    "line {}: expected {expected} components, found {}",
                    lineno + 1,
                    v.len()
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::Data(format!(
                    "line {}: non-finite component for {token:?}",
                    lineno + 1
                )));
            }
            vectors.insert(token.to_string(), v);
        }
        let dim = dim.ok_or_else(|| Error::NoData("empty vector table".into()))?;
        Ok(Self { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src).map_err(|e| e.context(path.display()))
    }

    pub fn to_text(&self) -> String {
        let sorted: BTreeMap<_, _> = self.vectors.iter().collect();
        let mut out = String::new();
        for (token, v) in sorted {
            out.push_str(token);
            for x in v {
                out.push(' ');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Average of the lowercased whitespace tokens' vectors; unknown
    /// tokens contribute the zero vector.
    pub fn embed_phrase(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        let mut n = 0usize;
        for token in text.split_whitespace() {
            n += 1;
            if let Some(v) = self.vectors.get(&token.to_lowercase()) {
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += f64::from(*x));
            }
        }
        let n = n.max(1) as f64;
        acc.into_iter().map(|x| (x / n) as f32).collect()
    }
}

/// Vectors keyed by catalog entry id, in the `id<TAB>v1,v2,...` format.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportedVectors {
    dim: usize,
    rows: Vec<(u64, Vec<f32>)>,
    index: HashMap<u64, usize>,
}

impl ImportedVectors {
    pub fn parse(src: &str) -> Result<Self> {
        let mut dim = None;
        let mut rows = Vec::new();
        let mut index = HashMap::new();
        for (lineno, line) in src.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() {
                continue;
            }
            let (id, vals) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("line {}: expected id<TAB>values", lineno + 1))
            })?;
            let id: u64 = id.trim().parse().map_err(|_| {
                Error::Format(format!("line {}: bad id {:?}", lineno + 1, id.trim()))
            })?;
            let v: Vec<f32> = vals
                .split(',')
                .map(|f| {
                    f.trim().parse::<f32>().map_err(|_| {
                        Error::Data(format!("id {id}: bad number {:?}", f.trim()))
                    })
                })
                .collect::<Result<_>>()?;
            if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Data(format!(
                    "id {id}: non-finite component at position {bad}"
                )));
            }
            let expected = *dim.get_or_insert(v.len());
            if v.len() != expected {
                return Err(Error::Shape(format!(
                    "id {id}: expected {expected} components, found {}",
                    v.len()
                )));
            }
            if index.insert(id, rows.len()).is_some() {
                return Err(Error::Conflict(format!("id {id} appears twice")));
            }
            rows.push((id, v));
        }
        let dim = dim.ok_or_else(|| Error::NoData("no vectors in file".into()))?;
        Ok(Self { dim, rows, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src).map_err(|e| e.context(path.display()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, v) in &self.rows {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            out.push_str(&format!("{id}\t{}\n", vals.join(",")));
        }
        out
    }

    pub fn from_rows(rows: Vec<(u64, Vec<f32>)>) -> Result<Self> {
        let mut text = String::new();
        for (id, v) in &rows {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            text.push_str(&format!("{id}\t{}\n", vals.join(",")));
        }
        Self::parse(&text)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.rows.iter().map(|(id, _)| *id)
    }

    pub fn get(&self, id: u64) -> Option<&[f32]> {
        self.index.get(&id).map(|&i| self.rows[i].1.as_slice())
    }
}

/// Source of value vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueEmbedderMode {
    OneHot(OneHotTable),
    PretrainedLookup(VectorTable),
    ImportedFile(ImportedVectors),
}

impl ValueEmbedderMode {
    pub fn dim(&self) -> usize {
        match self {
            ValueEmbedderMode::OneHot(t) => t.dim(),
            ValueEmbedderMode::PretrainedLookup(t) => t.dim(),
            ValueEmbedderMode::ImportedFile(t) => t.dim(),
        }
    }

    fn describe(&self) -> String {
        match self {
            ValueEmbedderMode::OneHot(t) => format!("one-hot(table_size={})", t.table_size()),
            ValueEmbedderMode::PretrainedLookup(t) => format!("pretrained-lookup(dim={})", t.dim()),
            ValueEmbedderMode::ImportedFile(t) => format!("imported(dim={})", t.dim()),
        }
    }
}

/// Value vector for a catalog entry.
pub fn embed_text_value(entry: &CatalogEntry, mode: &ValueEmbedderMode) -> Result<Vec<f32>> {
    match mode {
        ValueEmbedderMode::OneHot(t) => t
            .row_index(&entry.text)
            .map(|r| t.rows()[r].clone())
            .ok_or_else(|| {
                Error::Lookup(format!("entry {} has no one-hot row", entry.id))
            }),
        ValueEmbedderMode::PretrainedLookup(t) => Ok(t.embed_phrase(&entry.text)),
        ValueEmbedderMode::ImportedFile(t) => t
            .get(entry.id)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| Error::Lookup(format!("no imported vector for entry {}", entry.id))),
    }
}

/// Build a memory with one record per (entry, voice) pair, for voices
/// `0..voices_per_entry`. Record ids are assigned sequentially.
pub fn build_memory_from_catalog(
    catalog: &[CatalogEntry],
    kcfg: &KeyEmbedderConfig,
    vmode: &ValueEmbedderMode,
    voices_per_entry: usize,
) -> Result<ExternalMemory> {
    if catalog.is_empty() {
        return Err(Error::InvalidArgument("catalog is empty".into()));
    }
    if voices_per_entry == 0 || voices_per_entry > kcfg.n_voices {
        return Err(Error::InvalidArgument(format!(
            "voices_per_entry must be in [1, {}], got {voices_per_entry}",
            kcfg.n_voices
        )));
    }
    validate_catalog(catalog)?;
    let embedder = AudioKeyEmbedder::new(*kcfg)?;

    let built: Vec<(Vec<Vec<f32>>, Vec<f32>)> = catalog
        .par_iter()
        .map(|entry| {
            let value = embed_text_value(entry, vmode).map_err(|e| e.context(format!("entry {}", entry.id)))?;
            let keys = (0..voices_per_entry)
                .map(|v| embedder.key(&entry.text, v))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.context(format!("entry {}", entry.id)))?;
            Ok((keys, value))
        })
        .collect::<Result<_>>()?;

    let provenance = format!(
        "keys=synth-audio(d_key={}, n_voices={}, frames_per_char={}, seed={}); values={}; voices_per_entry={voices_per_entry}",
        kcfg.d_key,
        kcfg.n_voices,
        kcfg.frames_per_char,
        kcfg.seed,
        vmode.describe()
    );
    let mut mem = ExternalMemory::new(kcfg.d_key, vmode.dim())?.with_provenance(provenance);
    let mut next_id = 0u64;
    for (entry, (keys, value)) in catalog.iter().zip(built) {
        for key in keys {
            mem.append(MemoryRecord::new(next_id, key, value.clone(), entry.id))
                .map_err(|e| e.context(format!("entry {}", entry.id)))?;
            next_id += 1;
        }
    }
    Ok(mem)
}

/// Pair externally produced key and value vectors into a memory.
///
/// Both files are keyed by catalog entry id; record ids equal entry ids and
/// records follow the keys file order.
pub fn ingest_precomputed(
    keys: &ImportedVectors,
    values: &ImportedVectors,
    catalog: &[CatalogEntry],
) -> Result<ExternalMemory> {
    let key_ids: BTreeSet<u64> = keys.ids().collect();
    let value_ids: BTreeSet<u64> = values.ids().collect();
    let offending: Vec<u64> = key_ids.symmetric_difference(&value_ids).copied().collect();
    if !offending.is_empty() {
        return Err(Error::Consistency(format!(
            "ids present in only one of the key/value files: {offending:?}"
        )));
    }
    let catalog_ids: BTreeSet<u64> = catalog.iter().map(|e| e.id).collect();
    let unknown: Vec<u64> = key_ids.difference(&catalog_ids).copied().collect();
    if !unknown.is_empty() {
        return Err(Error::Consistency(format!(
            "ids not present in the catalog: {unknown:?}"
        )));
    }
    let mut mem = ExternalMemory::new(keys.dim(), values.dim())?
        .with_provenance(format!("precomputed(d_key={}, d_value={})", keys.dim(), values.dim()));
    for id in keys.ids() {
        let rec = MemoryRecord::new(
            id,
            keys.get(id).unwrap().to_vec(),
            values.get(id).unwrap().to_vec(),
            id,
        );
        mem.append(rec).map_err(|e| e.context(format!("id {id}")))?;
    }
    Ok(mem)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> KeyEmbedderConfig {
        KeyEmbedderConfig {
            d_key: 64,
            n_voices: 10,
            seed: 7,
            frames_per_char: 2,
        }
    }

    #[test]
    fn key_is_deterministic_and_text_sensitive() {
        let e = AudioKeyEmbedder::new(cfg()).unwrap();
        assert_eq!(e.key("hello", 3).unwrap(), e.key("hello", 3).unwrap());
        assert_ne!(e.key("abc", 0).unwrap(), e.key("abd", 0).unwrap());
        assert_ne!(e.key("abc", 0).unwrap(), e.key("abc", 1).unwrap());
        assert_eq!(e.frames("abcd", 0).unwrap().len(), 8);
    }

    #[test]
    fn key_errors() {
        let e = AudioKeyEmbedder::new(cfg()).unwrap();
        assert!(matches!(e.key("", 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(e.key("a", 10), Err(Error::InvalidArgument(_))));
        assert!(AudioKeyEmbedder::new(KeyEmbedderConfig { n_voices: 0, ..cfg() }).is_err());
    }

    #[test]
    fn pretrained_lookup_rules() {
        let mut t = VectorTable::new(2).unwrap();
        t.insert("new", vec![1.0, 2.0]).unwrap();
        t.insert("york", vec![3.0, -2.0]).unwrap();
        assert_eq!(t.embed_phrase("zzz qqq"), vec![0.0, 0.0]);
        let v = t.embed_phrase("New York");
        assert!((v[0] - 2.0).abs() < 1e-7 && v[1].abs() < 1e-7);
        assert_eq!(t.embed_phrase("york new"), t.embed_phrase("new york"));
        // unknown tokens count towards the average as zeros
        assert_eq!(t.embed_phrase("new oov"), vec![0.5, 1.0]);
    }

    #[test]
    fn vector_table_text_format() {
        let t = VectorTable::parse("the 0.1 0.2 0.3\ncat -1 0 1\n").unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.get("cat"), Some(&[-1.0f32, 0.0, 1.0][..]));
        assert!(VectorTable::parse("a 1 2\nb 1\n").is_err());
        let again = VectorTable::parse(&t.to_text()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn onehot_table_rows() {
        let cat: Vec<CatalogEntry> = (0..5)
            .map(|i| CatalogEntry::new(i, format!("w{i}")).unwrap())
            .collect();
        let t = OneHotTable::for_catalog(&cat, 2500, 16, 1).unwrap();
        assert_eq!(t.table_size(), 2500);
        let mode = ValueEmbedderMode::OneHot(t.clone());
        let v = embed_text_value(&cat[3], &mode).unwrap();
        assert_eq!(v, t.rows()[3]);
        let stranger = CatalogEntry::new(99, "unseen").unwrap();
        assert!(matches!(embed_text_value(&stranger, &mode), Err(Error::Lookup(_))));
        assert!(OneHotTable::for_catalog(&cat, 4, 16, 1).is_err());
    }

    #[test]
    fn imported_vectors_format() {
        let v = ImportedVectors::parse("3\t1.0,2.0  \n7\t-1,0.5\n").unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.get(7), Some(&[-1.0f32, 0.5][..]));
        let err = ImportedVectors::parse("1\t1.0,NaN\n").unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("id 1")));
        assert!(ImportedVectors::parse("1\t1,2\n1\t3,4\n").is_err());
        assert!(ImportedVectors::parse("1\t1,2\n2\t3\n").is_err());
    }

    #[test]
    fn build_counts_and_traceability() {
        let cat = vec![CatalogEntry::new(42, "only").unwrap()];
        let table = VectorTable::synthetic(["only"], 8, 0).unwrap();
        let mode = ValueEmbedderMode::PretrainedLookup(table);
        let mem = build_memory_from_catalog(&cat, &cfg(), &mode, 1).unwrap();
        assert_eq!(mem.len(), 1);
        assert_eq!(mem.records()[0].entry_id, 42);
        assert!(build_memory_from_catalog(&[], &cfg(), &mode, 1).is_err());
        assert!(build_memory_from_catalog(&cat, &cfg(), &mode, 11).is_err());
    }

    #[test]
    fn ingest_checks_id_sets() {
        let cat: Vec<CatalogEntry> = (0..3)
            .map(|i| CatalogEntry::new(i, format!("w{i}")).unwrap())
            .collect();
        let keys = ImportedVectors::parse("0\t1,0\n1\t0,1\n2\t1,1\n").unwrap();
        let values = ImportedVectors::parse("0\t5\n1\t6\n2\t7\n").unwrap();
        let mem = ingest_precomputed(&keys, &values, &cat).unwrap();
        assert_eq!(mem.len(), 3);
        assert_eq!(mem.get(1).unwrap().value, vec![6.0]);

        let short = ImportedVectors::parse("0\t5\n1\t6\n").unwrap();
        let err = ingest_precomputed(&keys, &short, &cat).unwrap_err();
        assert!(matches!(err, Error::Consistency(ref m) if m.contains('2')));
    }
}
