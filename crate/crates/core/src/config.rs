//! Training configuration: TOML file plus `key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{KtError, Result};
use crate::models::{ModelKind, ModelSpec, RecurrentCell};
use crate::optim::AdamConfig;
use crate::relation::DEFAULT_THETA;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dim: usize,
    pub window: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the learned attention in the RKT blend.
    pub lambda: f64,
    /// Relation threshold for RKT.
    pub theta: f64,
    pub memory_slots: usize,
    pub cell: RecurrentCell,
    /// Gradient norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    /// Seed of the student split (kept apart from `seed` so that model
    /// seeds can vary over a fixed split).
    pub split_seed: u64,
    /// Cap on pair increments per student when counting relations.
    pub pair_cap: Option<usize>,
    /// Batch size used for evaluation forward passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Rkt,
            dim: 200,
            window: crate::data::DEFAULT_WINDOW,
            batch_size: 128,
            learning_rate: 1e-3,
            dropout: 0.1,
            l2: 1e-5,
            epochs: 20,
            seed: 0,
            lambda: 0.5,
            theta: DEFAULT_THETA,
            memory_slots: 50,
            cell: RecurrentCell::Lstm,
            clip_norm: 5.0,
            validation_fraction: 0.1,
            test_fraction: 0.2,
            split_seed: 0,
            pair_cap: None,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| KtError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if given), applies `overrides`, then validates. See
    /// [`resolve_toml`].
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let cfg: TrainConfig = resolve_toml(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KtError::Config(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !(self.l2 >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("learning_rate must be > 0, l2 and clip_norm >= 0".into());
        }
        let fractions = self.validation_fraction + self.test_fraction;
        if !(0.0..1.0).contains(&self.validation_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || fractions >= 1.0
        {
            return bad("validation and test fractions must be in [0, 1) and sum below 1".into());
        }
        if !(0.0..2.0).contains(&self.theta) {
            return bad(format!("theta {} outside [0, 2)", self.theta));
        }
        self.model_spec(1, 0).validate()
    }

    pub fn model_spec(&self, num_exercises: usize, memory_students: usize) -> ModelSpec {
        ModelSpec {
            kind: self.model,
            num_exercises,
            dim: self.dim,
            window: self.window,
            memory_slots: self.memory_slots,
            lambda: self.lambda,
            dropout: self.dropout,
            cell: self.cell,
            memory_students,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            l2: self.l2,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            ..AdamConfig::default()
        }
    }
}

/// Deserialises `T` from an optional TOML file with `key=value`
/// overrides applied on top. Override values are parsed as TOML; anything
/// that does not parse is taken as a bare string.
pub fn resolve_toml<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| KtError::io(p, e))?;
            text.parse()
                .map_err(|e: toml::de::Error| KtError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| KtError::Config(format!("override `{o}` is not key=value")))?;
        table.insert(key.trim().to_string(), parse_value(raw.trim()));
    }
    table.try_into().map_err(|e: toml::de::Error| KtError::Config(e.to_string()))
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
