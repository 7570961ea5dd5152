//! Flat key-value configuration files.
//!
//! The format is INI-style: `key = value` lines, `#`/`;` comments, and
//! optional `[section]` headers that prefix the keys that follow. Fully
//! dotted keys (`train.mode = confusable`) work with or without section
//! headers; both spellings address the same key.

use std::collections::BTreeMap;
use std::path::Path;

use crate::episode::EpisodeConfig;
use crate::error::{Error, Result};
use crate::learner::{LearnerKind, OptimizerKind};
use crate::training::{TrainConfig, TrainMode};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(lineno + 1, "unterminated section header"))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(lineno + 1, format!("expected key = value, got `{line}`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(lineno + 1, "empty key"));
            }
            let full = if section.is_empty() || key.contains('.') {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            values.insert(full, value.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Override or insert a key (CLI flags override file values).
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::config(format!("missing required key `{key}`")))
    }

    /// Serialize back to sorted `key = value` lines (the run-manifest form).
    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Assemble a [`TrainConfig`] from `train.*`, `episode.*`, `cme.*` and
    /// `model.*` keys, with the documented defaults for anything absent.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let n_te: usize = self.get_or("cme.n_te", 8)?;
        let n_d: usize = self.get_or("episode.n_d", 5)?;
        let mut cfg = TrainConfig::defaults(n_te, n_d);
        cfg.episodes = self.get_or("train.episodes", cfg.episodes)?;
        cfg.episode.n_s = self.get_or("episode.n_s", cfg.episode.n_s)?;
        cfg.episode.n_q = self.get_or("episode.n_q", cfg.episode.n_q)?;
        cfg.episode.n_tc = self.get_or(
            "episode.n_tc",
            EpisodeConfig::derived_targets(n_te, n_d),
        )?;
        cfg.rho = self.get_or("cme.rho", cfg.rho)?;
        cfg.m_steps = self.get_or("cme.m_steps", cfg.m_steps)?;
        cfg.cme_temperature = self.get_or("cme.temperature", cfg.cme_temperature)?;
        if let Some(kind) = self.raw("train.learner") {
            cfg.learner = LearnerKind::parse(kind)?;
        }
        if let Some(opt) = self.raw("train.optimizer") {
            cfg.optimizer = OptimizerKind::parse(opt)?;
        }
        cfg.lr = self.get_or("train.lr", cfg.lr)?;
        if let Some(mode) = self.raw("train.mode") {
            cfg.mode = TrainMode::parse(mode)?;
        }
        cfg.eval_every = self.get_or("train.eval_every", cfg.eval_every)?;
        cfg.eval_episodes = self.get_or("train.eval_episodes", cfg.eval_episodes)?;
        cfg.patience = self.get_or("train.patience", cfg.patience)?;
        cfg.min_delta = self.get_or("train.min_delta", cfg.min_delta)?;
        if let Some(hidden) = self.raw("model.hidden") {
            cfg.hidden = hidden
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::config(format!("bad model.hidden entry `{s}`")))
                })
                .collect::<Result<Vec<usize>>>()?;
        }
        cfg.d_emb = self.get_or("model.d_emb", cfg.d_emb)?;
        cfg.audit_cme = self.get_or("train.audit_cme", cfg.audit_cme)?;
        cfg.seed = self.get_or("train.seed", cfg.seed)?;
        Ok(cfg)
    }

    /// Assemble a [`crate::dataset::SyntheticSpec`] from `synthetic.*` keys.
    pub fn synthetic_spec(&self) -> Result<crate::dataset::SyntheticSpec> {
        let spec = crate::dataset::SyntheticSpec {
            k: self.require("synthetic.k")?,
            pairs: self.get_or("synthetic.pairs", 0)?,
            d_in: self.get_or("synthetic.d_in", 24)?,
            sigma_within: self.get_or("synthetic.sigma_within", 1.0)?,
            delta_pair: self.get_or("synthetic.delta_pair", 2.0)?,
            delta_far: self.get_or("synthetic.delta_far", 12.0)?,
            n_per_class: self.get_or("synthetic.n_per_class", 30)?,
            seed: self.get_or("synthetic.seed", 0)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}
