//! `key = value` run configuration. Values set on the command line win over
//! the file, which wins over the built-in defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use apnt::mixing::MixMode;
use apnt::pipeline::ExperimentConfig;
use apnt::training::TrainMode;
use apnt::{Error, Result};

/// Every key the file may contain, in the order they are documented.
pub const KEYS: &[&str] = &[
    "d_model",
    "n_heads",
    "d_head",
    "d_feed",
    "n_encoders",
    "patch_size",
    "lr",
    "beta1",
    "beta2",
    "epsilon",
    "iterations",
    "source_iterations",
    "mode",
    "mix",
    "seed",
    "shots_per_class",
    "augment_to",
    "n_way",
    "k_shot",
    "m_query",
    "knn_k",
    "source_per_class",
    "chunk",
    "target",
    "source",
    "seeds",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub target: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    /// Keys that were never set and fell back to their default.
    pub defaulted: Vec<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            target: None,
            source: None,
            seeds: None,
            defaulted: KEYS.to_vec(),
        }
    }
}

/// Splits file text into `(key, value)` pairs. `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

/// `a..b` (inclusive), `a..=b` or a comma list.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = value("seeds", a.trim())?;
        let b: u64 = value("seeds", b.trim_start_matches('=').trim())?;
        if b < a {
            return Err(Error::Config(format!("empty seed range {text}")));
        }
        return Ok((a..=b).collect());
    }
    text.split(',')
        .map(|s| value("seeds", s.trim()))
        .collect::<Result<Vec<u64>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::Config("seed list is empty".into()))
            } else {
                Ok(v)
            }
        })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.experiment;
        match key {
            "d_model" => e.model.d_model = value(key, v)?,
            "n_heads" => e.model.n_heads = value(key, v)?,
            "d_head" => e.model.d_head = value(key, v)?,
            "d_feed" => e.model.d_feed = value(key, v)?,
            "n_encoders" => e.model.n_encoders = value(key, v)?,
            "patch_size" => e.model.patch_size = value(key, v)?,
            "lr" => e.train.lr = value(key, v)?,
            "beta1" => e.train.beta1 = value(key, v)?,
            "beta2" => e.train.beta2 = value(key, v)?,
            "epsilon" => e.train.epsilon = value(key, v)?,
            "iterations" => e.train.total_iterations = value(key, v)?,
            "source_iterations" => e.train.source_iterations = value(key, v)?,
            "mode" => e.train.mode = value::<TrainMode>(key, v)?,
            "mix" => e.train.mix_mode = value::<MixMode>(key, v)?,
            "seed" => *e = e.with_seed(value(key, v)?),
            "shots_per_class" => e.split.shots_per_class = value(key, v)?,
            "augment_to" => e.split.augment_to = value(key, v)?,
            "n_way" => e.n_way = value(key, v)?,
            "k_shot" => e.k_shot = value(key, v)?,
            "m_query" => e.m_query = value(key, v)?,
            "knn_k" => e.knn_k = value(key, v)?,
            "source_per_class" => e.source_per_class = value(key, v)?,
            "chunk" => e.chunk = value(key, v)?,
            "target" => self.target = Some(PathBuf::from(v)),
            "source" => self.source = Some(PathBuf::from(v)),
            "seeds" => self.seeds = Some(parse_seeds(v)?),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        self.defaulted.retain(|k| *k != key);
        Ok(())
    }

    /// File pairs first, then overrides, each applied in order.
    pub fn build(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            for (k, v) in parse_pairs(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.experiment.validate()?;
        Ok(cfg)
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.defaulted.contains(&key)
    }
}
