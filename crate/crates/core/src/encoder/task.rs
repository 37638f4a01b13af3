//! Synthetic rare-token recognition task.
//!
//! The vocabulary has four kinds of token:
//!
//! - `Base`: frequent words in both splits, never in a catalog;
//! - `TrainRare`: rare words of the training split, listed in the
//!   training catalog;
//! - `TestRare`: rare words of the test split, absent from training; the
//!   test catalog covers a configurable fraction of them;
//! - `Distractor`: catalog-only words that never occur in utterances and
//!   pad catalogs to a fixed size.
//!
//! Every token has a fixed unit-norm label embedding; memory values are
//! exactly these embeddings. Utterance frames come from the same
//! audio-proxy frame generator as memory keys, plus Gaussian noise.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::config::KvConfig;
use crate::embedders::{build_memory_from_catalog, AudioKeyEmbedder, ImportedVectors, KeyEmbedderConfig, ValueEmbedderMode};
use crate::error::{Error, Result};
use crate::memory::{CatalogEntry, ExternalMemory};

const DATA_MAGIC: &[u8; 8] = b"KNNFDAT\0";
const DATA_VERSION: u32 = 1;
pub const MAX_VOCAB: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub seed: u64,
    /// Frame and key dimension.
    pub d_key: usize,
    /// Label-embedding (memory value) dimension.
    pub d_value: usize,
    pub n_voices: usize,
    /// Voices rendered per catalog entry.
    pub voices_per_entry: usize,
    pub frames_per_char: usize,
    pub n_base: usize,
    pub n_train_rare: usize,
    pub n_test_rare: usize,
    pub n_distractors: usize,
    pub n_train_utts: usize,
    pub n_test_utts: usize,
    pub tokens_per_utt: usize,
    /// Probability that a token slot holds a rare word.
    pub rare_prob: f64,
    /// Fraction of test rare slots filled with training rare words instead
    /// of unseen ones.
    pub test_seen_rare_frac: f64,
    /// Per-component frame noise, relative to the frame scale.
    pub noise: f64,
    /// Entries per test catalog, whatever the overlap.
    pub test_catalog_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_key: 64,
            d_value: 32,
            n_voices: 10,
            voices_per_entry: 4,
            frames_per_char: 1,
            n_base: 60,
            n_train_rare: 300,
            n_test_rare: 70,
            n_distractors: 80,
            n_train_utts: 800,
            n_test_utts: 300,
            tokens_per_utt: 4,
            rare_prob: 0.5,
            test_seen_rare_frac: 0.0,
            noise: 0.3,
            test_catalog_size: 75,
        }
    }
}

impl TaskConfig {
    pub fn vocab_size(&self) -> usize {
        self.n_base + self.n_train_rare + self.n_test_rare + self.n_distractors
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_key == 0 || self.d_value == 0 || self.frames_per_char == 0 {
            return bad("d_key, d_value and frames_per_char must be positive".into());
        }
        if self.voices_per_entry == 0 || self.voices_per_entry > self.n_voices {
            return bad(format!(
                "voices_per_entry {} must be in [1, n_voices = {}]",
                self.voices_per_entry, self.n_voices
            ));
        }
        if self.n_base == 0 || self.n_train_rare == 0 || self.n_test_rare == 0 {
            return bad("need at least one base, train-rare and test-rare token".into());
        }
        if self.vocab_size() > MAX_VOCAB {
            return bad(format!("vocabulary of {} exceeds {MAX_VOCAB}", self.vocab_size()));
        }
        if self.n_train_utts == 0 || self.n_test_utts == 0 || self.tokens_per_utt == 0 {
            return bad("utterance counts and length must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.rare_prob) || !(0.0..=1.0).contains(&self.test_seen_rare_frac) {
            return bad("rare_prob and test_seen_rare_frac must be in [0, 1]".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and ≥ 0, got {}", self.noise));
        }
        if self.test_catalog_size < self.n_test_rare {
            return bad(format!(
                "test catalog of {} entries cannot hold all {} test rare tokens",
                self.test_catalog_size, self.n_test_rare
            ));
        }
        if self.test_catalog_size > self.n_distractors {
            return bad(format!(
                "zero-overlap test catalog needs {} distractors, only {} exist",
                self.test_catalog_size, self.n_distractors
            ));
        }
        Ok(())
    }

    pub fn overlay(mut self, kv: &KvConfig) -> Result<Self> {
        macro_rules! take {
            ($($f:ident),*) => { $( self.$f = kv.get_or(concat!("task.", stringify!($f)), self.$f)?; )* };
        }
        take!(
            seed, d_key, d_value, n_voices, voices_per_entry, frames_per_char, n_base, n_train_rare, n_test_rare,
            n_distractors, n_train_utts, n_test_utts, tokens_per_utt, rare_prob, test_seen_rare_frac, noise,
            test_catalog_size
        );
        Ok(self)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        macro_rules! put {
            ($($f:ident),*) => { $( kv.set(concat!("task.", stringify!($f)), self.$f); )* };
        }
        put!(
            seed, d_key, d_value, n_voices, voices_per_entry, frames_per_char, n_base, n_train_rare, n_test_rare,
            n_distractors, n_train_utts, n_test_utts, tokens_per_utt, rare_prob, test_seen_rare_frac, noise,
            test_catalog_size
        );
    }

    fn key_config(&self) -> KeyEmbedderConfig {
        KeyEmbedderConfig {
            d_key: self.d_key,
            n_voices: self.n_voices,
            seed: self.seed,
            frames_per_char: self.frames_per_char,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Base,
    TrainRare,
    TestRare,
    Distractor,
}

impl TokenKind {
    pub fn is_rare(self) -> bool {
        matches!(self, TokenKind::TrainRare | TokenKind::TestRare)
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Self::Base, Self::TrainRare, Self::TestRare, Self::Distractor].get(c as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<u32>,
    pub voice: u32,
    /// frames × d_key
    pub frames: Array2<f64>,
    /// Token id of every frame.
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub cfg: TaskConfig,
    pub words: Vec<String>,
    pub kinds: Vec<TokenKind>,
    /// vocab × d_value, unit-norm rows, exactly representable in `f32`.
    pub label_table: Array2<f64>,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

fn random_word(rng: &mut impl Rng) -> String {
    let len = rng.random_range(4..=6);
    (0..len)
        .map(|i| {
            let set = if i % 2 == 0 { CONSONANTS } else { VOWELS };
            set[rng.random_range(0..set.len())] as char
        })
        .collect()
}

impl SyntheticTask {
    pub fn generate(cfg: &TaskConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a5c_0001);
        let vocab = cfg.vocab_size();

        let mut words = Vec::with_capacity(vocab);
        let mut seen = std::collections::HashSet::new();
        while words.len() < vocab {
            let w = random_word(&mut rng);
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let mut kinds = Vec::with_capacity(vocab);
        kinds.extend(std::iter::repeat_n(TokenKind::Base, cfg.n_base));
        kinds.extend(std::iter::repeat_n(TokenKind::TrainRare, cfg.n_train_rare));
        kinds.extend(std::iter::repeat_n(TokenKind::TestRare, cfg.n_test_rare));
        kinds.extend(std::iter::repeat_n(TokenKind::Distractor, cfg.n_distractors));

        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut label_table = Array2::zeros((vocab, cfg.d_value));
        for mut row in label_table.rows_mut() {
            let v: Vec<f64> = (0..cfg.d_value).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().zip(&v).for_each(|(r, x)| *r = (x / norm) as f32 as f64);
        }

        let ids_of = |k: TokenKind| -> Vec<u32> { (0..vocab as u32).filter(|&i| kinds[i as usize] == k).collect() };
        let base = ids_of(TokenKind::Base);
        let train_rare = ids_of(TokenKind::TrainRare);
        let test_rare = ids_of(TokenKind::TestRare);

        let embedder = AudioKeyEmbedder::new(cfg.key_config())?;
        let noise = Normal::new(0.0, cfg.noise / (cfg.d_key as f64).sqrt()).unwrap();
        let utterance = |rng: &mut ChaCha8Rng, test: bool| -> Result<Utterance> {
            let voice = rng.random_range(0..cfg.n_voices) as u32;
            let tokens: Vec<u32> = (0..cfg.tokens_per_utt)
                .map(|_| {
                    if rng.random::<f64>() < cfg.rare_prob {
                        let pool = if test && rng.random::<f64>() >= cfg.test_seen_rare_frac {
                            &test_rare
                        } else {
                            &train_rare
                        };
                        pool[rng.random_range(0..pool.len())]
                    } else {
                        base[rng.random_range(0..base.len())]
                    }
                })
                .collect();
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for &t in &tokens {
                for f in embedder.frames(&words[t as usize], voice as usize)? {
                    rows.extend(f.iter().map(|&x| x as f64 + noise.sample(rng)));
                    labels.push(t);
                }
            }
            let frames = Array2::from_shape_vec((labels.len(), cfg.d_key), rows).expect("row count matches labels");
            Ok(Utterance {
                tokens,
                voice,
                frames,
                labels,
            })
        };
        let train = (0..cfg.n_train_utts)
            .map(|_| utterance(&mut rng, false))
            .collect::<Result<Vec<_>>>()?;
        let test = (0..cfg.n_test_utts)
            .map(|_| utterance(&mut rng, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            words,
            kinds,
            label_table,
            train,
            test,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn ids_of(&self, kind: TokenKind) -> Vec<u32> {
        (0..self.words.len() as u32).filter(|&i| self.kinds[i as usize] == kind).collect()
    }

    fn entries(&self, ids: &[u32]) -> Result<Vec<CatalogEntry>> {
        ids.iter()
            .map(|&i| CatalogEntry::new(i as u64, self.words[i as usize].clone()))
            .collect()
    }

    /// Every training rare word plus every distractor.
    pub fn train_catalog(&self) -> Result<Vec<CatalogEntry>> {
        let mut ids = self.ids_of(TokenKind::TrainRare);
        ids.extend(self.ids_of(TokenKind::Distractor));
        self.entries(&ids)
    }

    /// Fixed-size test catalog holding `round(overlap · n_test_rare)` test
    /// rare words, padded with distractors. Catalogs for increasing overlap
    /// are nested.
    pub fn test_catalog(&self, overlap: f64) -> Result<Vec<CatalogEntry>> {
        if !(0.0..=1.0).contains(&overlap) {
            return Err(Error::Config(format!("overlap must be in [0, 1], got {overlap}")));
        }
        let mut rare = self.ids_of(TokenKind::TestRare);
        rare.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7a5c_0002));
        let k = (overlap * rare.len() as f64).round() as usize;
        let mut ids: Vec<u32> = rare[..k].to_vec();
        let distractors = self.ids_of(TokenKind::Distractor);
        let need = self.cfg.test_catalog_size - k;
        if need > distractors.len() {
            return Err(Error::Config(format!(
                "overlap {overlap} needs {need} distractors, only {} exist",
                distractors.len()
            )));
        }
        ids.extend_from_slice(&distractors[..need]);
        ids.sort_unstable();
        self.entries(&ids)
    }

    /// Memory over `catalog` with audio-proxy keys and label embeddings as
    /// values. Entry ids are token ids.
    pub fn build_memory(&self, catalog: &[CatalogEntry]) -> Result<ExternalMemory> {
        let rows = catalog
            .iter()
            .map(|e| {
                let row = self
                    .label_table
                    .row(e.id as usize)
                    .iter()
                    .map(|&v| v as f32)
                    .collect::<Vec<_>>();
                (e.id, row)
            })
            .collect();
        let values = ValueEmbedderMode::ImportedFile(ImportedVectors::from_rows(rows)?);
        build_memory_from_catalog(catalog, &self.cfg.key_config(), &values, self.cfg.voices_per_entry)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(DATA_MAGIC, DATA_VERSION);
        let mut kv = KvConfig::new();
        self.cfg.write_kv(&mut kv);
        w.str(&kv.to_text());
        w.u64(self.words.len() as u64);
        for (word, kind) in self.words.iter().zip(&self.kinds) {
            w.str(word);
            w.u8(kind.code());
        }
        w.f64s(self.label_table.as_slice().unwrap());
        for split in [&self.train, &self.test] {
            w.u64(split.len() as u64);
            for u in split {
                w.u32(u.voice);
                w.u64(u.tokens.len() as u64);
                u.tokens.iter().for_each(|&t| w.u32(t));
                w.u64(u.labels.len() as u64);
                u.labels.iter().for_each(|&t| w.u32(t));
                w.f64s(u.frames.as_slice().unwrap());
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, DATA_MAGIC, DATA_VERSION, "dataset")?;
        let corrupt = |m: String| Error::Corruption(format!("dataset: {m}"));
        let kv = KvConfig::parse(&r.str()?).map_err(|e| corrupt(e.to_string()))?;
        let cfg = TaskConfig::default().overlay(&kv).map_err(|e| corrupt(e.to_string()))?;
        cfg.validate().map_err(|e| corrupt(e.to_string()))?;
        let vocab = r.len()?;
        if vocab != cfg.vocab_size() {
            return Err(corrupt(format!("vocabulary of {vocab}, config says {}", cfg.vocab_size())));
        }
        let mut words = Vec::with_capacity(vocab);
        let mut kinds = Vec::with_capacity(vocab);
        for _ in 0..vocab {
            words.push(r.str()?);
            kinds.push(TokenKind::from_code(r.u8()?).ok_or_else(|| corrupt("unknown token kind".into()))?);
        }
        let label_table = Array2::from_shape_vec((vocab, cfg.d_value), r.f64s(vocab * cfg.d_value)?)
            .map_err(|e| corrupt(e.to_string()))?;
        let read_split = |r: &mut ByteReader| -> Result<Vec<Utterance>> {
            let n = r.len()?;
            r.expect_at_least(n as u64, 20)?;
            (0..n)
                .map(|_| {
                    let voice = r.u32()?;
                    let nt = r.len()?;
                    r.expect_at_least(nt as u64, 4)?;
                    let tokens = (0..nt).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                    let nl = r.len()?;
                    r.expect_at_least(nl as u64, 4)?;
                    let labels = (0..nl).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                    if labels.iter().chain(&tokens).any(|&t| t as usize >= vocab) {
                        return Err(corrupt("token id out of range".into()));
                    }
                    r.expect_at_least((nl as u64).saturating_mul(cfg.d_key as u64), 8)?;
                    let frames = Array2::from_shape_vec((nl, cfg.d_key), r.f64s(nl * cfg.d_key)?)
                        .map_err(|e| corrupt(e.to_string()))?;
                    Ok(Utterance {
                        tokens,
                        voice,
                        frames,
                        labels,
                    })
                })
                .collect()
        };
        let train = read_split(&mut r)?;
        let test = read_split(&mut r)?;
        r.finish()?;
        Ok(Self {
            cfg,
            words,
            kinds,
            label_table,
            train,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(|e| e.context(path.display().to_string()))
    }
}
