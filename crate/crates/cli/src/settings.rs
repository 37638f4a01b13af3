//! Resolution of run parameters from a config file and command-line flags.

use std::fmt::Display;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use knnfuse::ann::AnnParams;
use knnfuse::config::KvConfig;
use knnfuse::encoder::{EncoderConfig, EvalRetrieval, TaskConfig, TrainConfig};
use sha2::{Digest, Sha256};

/// Component seeds that fall back to the global `seed` key.
const SEED_KEYS: &[&str] = &[
    "task.seed",
    "model.seed",
    "train.seed",
    "embed.seed",
    "ann.seed",
    "eval.seed",
    "gradcheck.seed",
];

/// Parameters for one invocation.
///
/// `given` holds what the user supplied (config file, then flags on top);
/// `resolved` collects every parameter the command actually read, defaults
/// included. The snapshot and fingerprint are taken from `resolved`.
pub struct Run {
    given: KvConfig,
    resolved: KvConfig,
    out_dir: PathBuf,
}

impl Run {
    pub fn new(config: Option<&Path>, out_dir: Option<&Path>, flags: &KvConfig) -> Result<Self> {
        let mut given = match config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        given.overlay(flags);
        if let Some(seed) = given.get_str("seed").map(str::to_owned) {
            for key in SEED_KEYS {
                if given.get_str(key).is_none() {
                    given.set(*key, &seed);
                }
            }
        }
        Ok(Self {
            given,
            resolved: KvConfig::new(),
            out_dir: out_dir.map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        })
    }

    /// Read one parameter, recording the value used.
    pub fn param<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.given.get_or(key, default)?;
        self.resolved.set(key, &v);
        Ok(v)
    }

    pub fn str_param(&mut self, key: &str, default: &str) -> String {
        let v = self.given.get_str(key).unwrap_or(default).to_owned();
        self.resolved.set(key, &v);
        v
    }

    pub fn task(&mut self) -> Result<TaskConfig> {
        let cfg = TaskConfig::default().overlay(&self.given)?;
        cfg.write_kv(&mut self.resolved);
        Ok(cfg)
    }

    pub fn train(&mut self) -> Result<TrainConfig> {
        let cfg = TrainConfig::default().overlay(&self.given)?;
        cfg.write_kv(&mut self.resolved);
        Ok(cfg)
    }

    /// Encoder settings under `model.*`. `d_model` follows the key width
    /// and fusion sits at the middle block unless set explicitly.
    pub fn model(&mut self, d_key: usize) -> Result<EncoderConfig> {
        let base = EncoderConfig {
            d_model: d_key,
            ..EncoderConfig::default()
        };
        let given = section(&self.given, "model.");
        let mut cfg = base.overlay(&given)?;
        if given.get_str("fusion_at").is_none() {
            cfg.fusion_at = vec![cfg.n_layers.div_ceil(2).max(1)];
        }
        let mut kv = KvConfig::new();
        cfg.write_kv(&mut kv);
        for k in kv.keys() {
            self.resolved.set(format!("model.{k}"), kv.get_str(k).unwrap());
        }
        Ok(cfg)
    }

    /// Index parameters under `prefix` (`ann.` or `eval.`), starting from
    /// `base`.
    pub fn ann(&mut self, prefix: &str, base: AnnParams) -> Result<AnnParams> {
        let mut p = base;
        let mut field = |name: &str, v: &mut usize| -> Result<()> {
            *v = self.param(&format!("{prefix}{name}"), *v)?;
            Ok(())
        };
        field("d_target", &mut p.d_target)?;
        field("n_subspaces", &mut p.n_subspaces)?;
        field("m", &mut p.m)?;
        field("ef_construction", &mut p.ef_construction)?;
        field("n_centroids", &mut p.n_centroids)?;
        field("opq_iters", &mut p.opq_iters)?;
        field("train_sample", &mut p.train_sample)?;
        p.seed = self.param(&format!("{prefix}seed"), p.seed)?;
        Ok(p)
    }

    /// Approximate retrieval used by evaluation commands, under `eval.*`.
    pub fn eval_retrieval(&mut self, d_key: usize) -> Result<EvalRetrieval> {
        let base = EvalRetrieval::for_dim(d_key);
        let ann = self.ann("eval.", base.ann)?;
        let ef_search = self.param("eval.ef_search", base.ef_search)?;
        Ok(EvalRetrieval { ann, ef_search })
    }

    /// Output path: relative paths land under the output directory.
    pub fn output(&self, path: &Path) -> Result<PathBuf> {
        let p = if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_dir.join(path)
        };
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(p)
    }

    /// First 16 hex digits of the SHA-256 of the resolved parameters.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.resolved.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Write `<output>.config` with the resolved parameters.
    pub fn snapshot(&self, output: &Path) -> Result<PathBuf> {
        let mut name = output.as_os_str().to_owned();
        name.push(".config");
        let path = PathBuf::from(name);
        let text = format!("# fingerprint {}\n{}", self.fingerprint(), self.resolved.to_text());
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Keys under `prefix`, with the prefix stripped.
fn section(kv: &KvConfig, prefix: &str) -> KvConfig {
    let mut out = KvConfig::new();
    for k in kv.keys() {
        if let Some(rest) = k.strip_prefix(prefix) {
            out.set(rest, kv.get_str(k).unwrap());
        }
    }
    out
}

/// CSV report; the header row is written on creation.
pub struct Report {
    w: csv::Writer<File>,
}

impl Report {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(header)?;
        Ok(Self { w })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.w.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
