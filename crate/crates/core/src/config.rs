//! TOML run configuration for the `meta-train` command.
//!
//! Every search hyperparameter has a default, so the smallest valid file
//! names only the task:
//!
//! ```toml
//! [[tasks]]
//! source = "blobs"
//! classes = 2
//! dim = 2
//! separation = 4.0
//! n = 500
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, TaskDataset};
use crate::error::{Error, Result};
use crate::evolution::EvolutionConfig;
use crate::fitness::FilterConfig;
use crate::gp::GpConfig;
use crate::learner::LearnerSpec;
use crate::meta::MetaTrainConfig;
use crate::network::Activation;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `0` uses every core.
    #[serde(default)]
    pub workers: usize,
    pub tasks: Vec<DatasetSpec>,
    #[serde(default)]
    pub gp: GpConfig,
    #[serde(default)]
    pub meta: MetaTrainConfig,
    #[serde(default)]
    pub filters: FilterConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub learner: LearnerSpec,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub local_search: bool,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|span| field_at(text, span.start))
                .unwrap_or_else(|| "<document>".into());
            Error::config(field, e.message().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        self.evolution_config().validate()
    }

    pub fn evolution_config(&self) -> EvolutionConfig {
        EvolutionConfig {
            gp: self.gp.clone(),
            meta: self.meta.clone(),
            filters: self.filters.clone(),
            train: self.train.clone(),
            learner: self.learner.clone(),
            activation: self.activation,
            local_search: self.local_search,
        }
    }

    pub fn load_tasks(&self) -> Result<Vec<TaskDataset>> {
        self.tasks.iter().map(DatasetSpec::load).collect()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }
}

/// Parses `k=v,k=v` into a TOML table. Integers stay integers unless the key
/// is listed in `real_keys`.
pub(crate) fn key_value_table(text: &str, real_keys: &[&str]) -> Result<toml::Table> {
    let mut table = toml::Table::new();
    for pair in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("option `{pair}` is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let value = if let Ok(i) = v.parse::<i64>() {
            if real_keys.contains(&k) {
                toml::Value::Float(i as f64)
            } else {
                toml::Value::Integer(i)
            }
        } else if let Ok(f) = v.parse::<f64>() {
            toml::Value::Float(f)
        } else if let Ok(b) = v.parse::<bool>() {
            toml::Value::Boolean(b)
        } else {
            toml::Value::String(v.into())
        };
        table.insert(k.into(), value);
    }
    Ok(table)
}

/// Dotted `table.key` name of the assignment containing byte `offset`.
fn field_at(text: &str, offset: usize) -> Option<String> {
    let mut table = String::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        let end = start + line.len();
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if offset < end {
            let key = trimmed.split_once('=').map(|(k, _)| k.trim().trim_matches('"'))?;
            return Some(if table.is_empty() {
                key.to_string()
            } else {
                format!("{table}.{key}")
            });
        }
        start = end;
    }
    None
}
