//! Plain-text `key = value` configuration: the config-file syntax, and the
//! serialization used inside checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Real;

/// Ordered key/value bag with typed accessors. Serialization is sorted by
/// key, so it is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    map: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `key = value` lines; `#` starts a comment, blank lines skip.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse(format!(
                    "config line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvMap { map })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Copy every entry of `other` into `self`, overwriting collisions.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn set_list(&mut self, key: &str, values: &[usize]) {
        let s: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.map.insert(key.to_string(), s.join(","));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Parse(format!("config key `{key}`: cannot parse {v:?}"))
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Parse(format!("config key `{key}`: bad list {v:?}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }
}

/// Schedule and bookkeeping for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: Real,
    pub batch_size: usize,
    pub epochs: usize,
    /// Linear KL warm-up from `kl_start` to `kl_end` over the first
    /// `kl_warmup_epochs` epochs.
    pub kl_start: Real,
    pub kl_end: Real,
    pub kl_warmup_epochs: usize,
    pub clip_norm: Real,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 800,
            epochs: 500,
            kl_start: 0.001,
            kl_end: 1.0,
            kl_warmup_epochs: 200,
            clip_norm: 100.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.clip_norm <= 0.0 {
            return Err(Error::InvalidArgument(
                "train config: learning_rate, batch_size and clip_norm must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.kl_start)
            || !(0.0..=1.0).contains(&self.kl_end)
            || self.kl_end < self.kl_start
        {
            return Err(Error::InvalidArgument(
                "train config: KL warm-up must be nondecreasing within [0, 1]".into(),
            ));
        }
        if self.kl_warmup_epochs == 0 {
            return Err(Error::InvalidArgument(
                "train config: kl_warmup_epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            kl_start: kv.get_or("kl_start", d.kl_start)?,
            kl_end: kv.get_or("kl_end", d.kl_end)?,
            kl_warmup_epochs: kv.get_or("kl_warmup_epochs", d.kl_warmup_epochs)?,
            clip_norm: kv.get_or("clip_norm", d.clip_norm)?,
            seed: kv.get_or("seed", d.seed)?,
            checkpoint_every: kv.get_or("checkpoint_every", d.checkpoint_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("learning_rate", self.learning_rate);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("kl_start", self.kl_start);
        kv.set("kl_end", self.kl_end);
        kv.set("kl_warmup_epochs", self.kl_warmup_epochs);
        kv.set("clip_norm", self.clip_norm);
        kv.set("seed", self.seed);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv
    }
}

pub fn model_config_to_kv(cfg: &ModelConfig) -> KvMap {
    let mut kv = KvMap::new();
    kv.set_list("latent_nodes", &cfg.latent_nodes);
    kv.set_list("latent_features", &cfg.latent_features);
    kv.set("route_features", cfg.route_features);
    kv.set("obs_nodes", cfg.obs_nodes);
    kv.set("obs_features", cfg.obs_features);
    kv.set("gcbs_per_stage", cfg.gcbs_per_stage);
    if let Some(c) = cfg.condition_classes {
        kv.set("condition_classes", c);
    }
    kv.set("rezero_on_branch", cfg.rezero_on_branch);
    kv
}

pub fn model_config_from_kv(kv: &KvMap) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let cfg = ModelConfig {
        latent_nodes: kv.get_list("latent_nodes")?.unwrap_or(d.latent_nodes),
        latent_features: kv
            .get_list("latent_features")?
            .unwrap_or(d.latent_features),
        route_features: kv.get_or("route_features", d.route_features)?,
        obs_nodes: kv.get_or("obs_nodes", d.obs_nodes)?,
        obs_features: kv.get_or("obs_features", d.obs_features)?,
        gcbs_per_stage: kv.get_or("gcbs_per_stage", d.gcbs_per_stage)?,
        condition_classes: kv.get("condition_classes")?,
        rezero_on_branch: kv.get_or("rezero_on_branch", false)?,
    };
    cfg.validate()?;
    Ok(cfg)
}
