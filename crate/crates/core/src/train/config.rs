//! Run configuration: named presets, TOML files and `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::filter::FilterMode;
use crate::data::synthetic::template_captions;
use crate::model::ModelConfig;
use crate::objectives::MimVariant;
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to zero at the last step.
    Cosine,
    /// Linear warmup, then constant.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub lambda_hitc: f64,
    pub lambda_mim: f64,
    pub mlm_ratio: f64,
    pub mim_ratio: f64,
    pub mim_variant: MimVariant,
    pub p_vc: f64,
    pub k: usize,
    pub queue_size: usize,
    pub momentum: f64,
    pub tau_init: f64,
    /// Feed visual concepts to the vision encoder.
    pub use_concepts: bool,
    pub random_crop: bool,
    /// Checkpoint every this many steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    Shapes,
    Cache,
    Remote,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(ProviderKind::Mock),
            "shapes" => Ok(ProviderKind::Shapes),
            "cache" => Ok(ProviderKind::Cache),
            "remote" => Ok(ProviderKind::Remote),
            other => Err(Error::Config(format!("unknown provider {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub dim: usize,
    pub seed: u64,
    /// Remote endpoint; falls back to the `VICHA_REMOTE_ENDPOINT` variable.
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub p: f64,
    pub mode: FilterMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub corpus: PathBuf,
    pub cache: PathBuf,
    pub concepts: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub provider: ProviderConfig,
    pub filter: FilterConfig,
    pub paths: PathsConfig,
}

fn default_paths() -> PathsConfig {
    PathsConfig {
        manifest: "data/manifest.jsonl".into(),
        corpus: "data/corpus.jsonl".into(),
        cache: "data/concept_cache.jsonl".into(),
        concepts: "data/concepts.jsonl".into(),
        output_dir: "runs/latest".into(),
    }
}

impl RunConfig {
    pub const PRESETS: [&'static str; 2] = ["desk", "paper"];

    /// Laptop-scale run over the synthetic shapes fixture.
    pub fn desk() -> Self {
        let vocab =
            Tokenizer::from_texts(template_captions().iter().map(String::as_str)).vocab_size();
        Self {
            preset: "desk".into(),
            seed: 0,
            model: ModelConfig::desk(vocab),
            training: TrainingConfig {
                steps: 300,
                batch_size: 8,
                learning_rate: 2e-3,
                warmup_steps: 50,
                schedule: Schedule::Cosine,
                weight_decay: 0.02,
                grad_clip: 1.0,
                lambda_hitc: crate::objectives::DEFAULT_LAMBDA_HITC,
                lambda_mim: crate::objectives::DEFAULT_LAMBDA_MIM,
                mlm_ratio: 0.15,
                mim_ratio: 0.75,
                mim_variant: MimVariant::U,
                p_vc: 0.30,
                k: 5,
                queue_size: 8,
                momentum: 0.995,
                tau_init: 0.07,
                use_concepts: true,
                random_crop: false,
                checkpoint_every: 100,
            },
            provider: ProviderConfig {
                kind: ProviderKind::Shapes,
                dim: 64,
                seed: 0,
                endpoint: None,
            },
            filter: FilterConfig {
                p: 1.0,
                mode: FilterMode::Global,
            },
            paths: default_paths(),
        }
    }

    /// Published pretraining hyperparameters (1.1M images, 10 epochs at
    /// batch 256).
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            seed: 0,
            model: ModelConfig::paper(),
            training: TrainingConfig {
                steps: 43_000,
                batch_size: 256,
                learning_rate: 1e-5,
                warmup_steps: 2_000,
                schedule: Schedule::Cosine,
                weight_decay: 0.02,
                grad_clip: 1.0,
                lambda_hitc: 0.1,
                lambda_mim: 1.0,
                mlm_ratio: 0.15,
                mim_ratio: 0.75,
                mim_variant: MimVariant::U,
                p_vc: 0.30,
                k: 15,
                queue_size: 65_536,
                momentum: 0.995,
                tau_init: 0.07,
                use_concepts: true,
                random_crop: true,
                checkpoint_every: 1_000,
            },
            provider: ProviderConfig {
                kind: ProviderKind::Remote,
                dim: 512,
                seed: 0,
                endpoint: None,
            },
            filter: FilterConfig {
                p: 0.7,
                mode: FilterMode::Global,
            },
            paths: default_paths(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {:?}",
                Self::PRESETS
            ))),
        }
    }

    /// Starts from the preset named by the file's `preset` key (desk when
    /// absent), then applies the file's values and finally `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingInput(p.to_path_buf()));
                }
                std::fs::read_to_string(p)?
                    .parse()
                    .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let preset = match file.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(other) => {
                return Err(Error::Config(format!(
                    "preset must be a string, got {other}"
                )))
            }
            None => "desk".into(),
        };
        let mut value = toml::Value::try_from(Self::preset(&preset)?)
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, toml::Value::Table(file));
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Applies `dotted.key=value` overrides to an existing config.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        let fail = |m: String| Err(Error::Config(m));
        if t.batch_size == 0 {
            return fail("training.batch_size must be positive".into());
        }
        if !(t.learning_rate > 0.0) {
            return fail(format!(
                "training.learning_rate {} must be positive",
                t.learning_rate
            ));
        }
        if !(0.0..=1.0).contains(&t.momentum) {
            return fail(format!("training.momentum {} outside [0, 1]", t.momentum));
        }
        if !(t.p_vc > 0.0 && t.p_vc <= 1.0) {
            return fail(format!("training.p_vc {} outside (0, 1]", t.p_vc));
        }
        if t.k > self.model.max_concepts {
            return fail(format!(
                "training.k {} exceeds model.max_concepts {}",
                t.k, self.model.max_concepts
            ));
        }
        if !(self.filter.p > 0.0 && self.filter.p <= 1.0) {
            return fail(format!("filter.p {} outside (0, 1]", self.filter.p));
        }
        self.model.validate()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `dotted.key=value`. The value is read as a TOML literal, or as a
/// plain string when it does not parse.
pub fn apply_override(config: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut slot = config;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = slot.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override key {key:?} does not name a table field"))
        })?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) && !matches!(*part, "endpoint") {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        slot = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    Ok(())
}
