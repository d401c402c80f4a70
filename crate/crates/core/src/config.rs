//! Application configuration: one human-editable TOML tree covering paths
//! and every module's settings, with environment-variable leaf overrides
//! and a config hash logged by every run.
//!
//! Override convention: `MOTIONLM__section__field=value` replaces the leaf
//! at `section.field` (double underscores separate path components; values
//! parse as TOML literals, falling back to strings).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lm::LMConfig;
use crate::pipeline::LoopConfig;
use crate::tokenizer::VQConfig;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "MOTIONLM__";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("override '{0}' does not address a leaf in the config tree")]
    BadOverride(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus_dir: "data/corpus".into(),
            checkpoint_dir: "data/checkpoints".into(),
            out_dir: "data/out".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSettings {
    /// "keyword" (offline) or "chat".
    pub backend: String,
    pub keywords: Vec<String>,
    pub base_url: String,
    pub model: String,
}

impl Default for JudgeSettings {
    fn default() -> Self {
        JudgeSettings {
            backend: "keyword".into(),
            keywords: vec![
                "walk".into(),
                "jump".into(),
                "wave".into(),
                "squat".into(),
                "turn".into(),
                "sit".into(),
            ],
            base_url: String::new(),
            model: String::new(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: u64,
    pub paths: Paths,
    pub vq: VQConfig,
    pub lm: LMConfig,
    pub train: TrainConfig,
    pub pipeline: LoopConfig,
    pub judge: JudgeSettings,
}

impl AppConfig {
    /// Parse TOML text and apply `MOTIONLM__…` environment overrides from
    /// the given (name, value) pairs.
    pub fn from_toml(
        text: &str,
        env: impl Iterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut tree: toml::Value = text.parse()?;
        for (name, value) in env {
            let Some(path) = name.strip_prefix(ENV_PREFIX) else { continue };
            let components: Vec<&str> = path.split("__").collect();
            apply_override(&mut tree, &components, &value)
                .ok_or_else(|| ConfigError::BadOverride(name.clone()))?;
        }
        Ok(tree.try_into()?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Stable hash of the fully resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        format!("{:x}", h.finalize())[..16].to_string()
    }
}

fn apply_override(tree: &mut toml::Value, path: &[&str], raw: &str) -> Option<()> {
    let (head, rest) = path.split_first()?;
    let table = tree.as_table_mut()?;
    if rest.is_empty() {
        let parsed = if let Ok(i) = raw.parse::<i64>() {
            toml::Value::Integer(i)
        } else if let Ok(f) = raw.parse::<f64>() {
            toml::Value::Float(f)
        } else if let Ok(b) = raw.parse::<bool>() {
            toml::Value::Boolean(b)
        } else {
            toml::Value::String(raw.to_string())
        };
        table.insert(head.to_string(), parsed);
        Some(())
    } else {
        let child = table
            .entry(head.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        apply_override(child, rest, raw)
    }
}
