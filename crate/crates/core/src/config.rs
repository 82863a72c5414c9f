//! Run configuration: one TOML file describing the model, the data, an
//! ordered set of training stages, and sampler defaults.
//!
//! Command-line overrides use dotted `key.path=value` syntax and are
//! applied to the parsed TOML before deserialization, so unknown keys are
//! rejected exactly like unknown keys in the file. The effective config can
//! be echoed back as TOML that parses to the same configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::TokenPolicy;
use crate::model::ModelConfig;
use crate::sampler::{DecodePlan, RemaskStrategy};
use crate::trainer::StageConfig;

/// Corpus and dataset locations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Named pretraining corpora: plain-text files, documents separated by
    /// blank lines.
    #[serde(default)]
    pub corpora: BTreeMap<String, PathBuf>,
    /// JSON-lines SFT corpus.
    #[serde(default)]
    pub sft: Option<PathBuf>,
    /// Held-out text for bound evaluation.
    #[serde(default)]
    pub heldout: Option<PathBuf>,
}

fn default_gen_len() -> usize {
    1024
}
fn default_block_size() -> usize {
    64
}
fn default_temperature() -> f64 {
    1.0
}
fn default_remask() -> String {
    "low-confidence".into()
}

/// Sampler defaults; the CLI can override any of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSettings {
    #[serde(default = "default_gen_len")]
    pub gen_len: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    /// Denoising steps per block; defaults to one per block position.
    #[serde(default)]
    pub steps_per_block: Option<usize>,
    /// Argmax decoding instead of sampling.
    #[serde(default)]
    pub greedy: bool,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// "low-confidence" or "none".
    #[serde(default = "default_remask")]
    pub remask: String,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            gen_len: default_gen_len(),
            block_size: default_block_size(),
            steps_per_block: None,
            greedy: false,
            temperature: default_temperature(),
            remask: default_remask(),
        }
    }
}

impl SamplerSettings {
    pub fn remask_strategy(&self) -> Result<RemaskStrategy> {
        match self.remask.as_str() {
            "low-confidence" => Ok(RemaskStrategy::LowConfidence),
            "none" => Ok(RemaskStrategy::None),
            other => Err(Error::Config(format!(
                "remask must be \"low-confidence\" or \"none\", got \"{other}\""
            ))),
        }
    }

    pub fn plan(&self, seed: u64) -> Result<DecodePlan> {
        let policy = if self.greedy {
            TokenPolicy::Greedy
        } else {
            TokenPolicy::Sample {
                temperature: self.temperature,
            }
        };
        let plan = DecodePlan {
            gen_len: self.gen_len,
            block_size: self.block_size,
            steps_per_block: self.steps_per_block.unwrap_or(self.block_size),
            policy,
            remask: self.remask_strategy()?,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Stages keyed by execution order: `[stages.1]`, `[stages.2]`, ...
    #[serde(default)]
    pub stages: BTreeMap<String, StageConfig>,
    #[serde(default)]
    pub sampler: SamplerSettings,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file and apply `key.path=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        for spec in overrides {
            apply_override(&mut value, spec)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for stage in self.stages.values() {
            stage.validate()?;
        }
        self.ordered_stages()?;
        self.sampler.remask_strategy()?;
        let mut names = std::collections::HashSet::new();
        for stage in self.stages.values() {
            if !names.insert(&stage.name) {
                return Err(Error::Config(format!(
                    "duplicate stage name '{}'",
                    stage.name
                )));
            }
        }
        Ok(())
    }

    /// Stages in numeric key order.
    pub fn ordered_stages(&self) -> Result<Vec<&StageConfig>> {
        let mut keyed: Vec<(u32, &StageConfig)> = Vec::with_capacity(self.stages.len());
        for (k, v) in &self.stages {
            let n: u32 = k.parse().map_err(|_| {
                Error::Config(format!("stage key '{k}' is not a positive integer"))
            })?;
            keyed.push((n, v));
        }
        keyed.sort_by_key(|&(n, _)| n);
        Ok(keyed.into_iter().map(|(_, s)| s).collect())
    }

    /// Effective configuration as TOML; parses back to an equal config.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config echo: {e}")))
    }
}

/// Apply one `key.path=value` override to a parsed TOML document. The value
/// is parsed as TOML where possible and falls back to a string.
pub fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key.path=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() {
        return Err(Error::Config(format!("override '{spec}' has an empty key")));
    }
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };

    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for seg in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{path}': '{seg}' is not a table")))?;
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let last = segments[segments.len() - 1];
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{path}' ends inside a non-table")))?;
    table.insert(last.to_string(), parsed);
    Ok(())
}
