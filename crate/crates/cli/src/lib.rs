//! Experiment harness for `fedsim`: YAML configs, the preset catalog,
//! dotted-path overrides, the run loop and output files.

pub mod app;
pub mod config;
pub mod output;
pub mod presets;
pub mod runner;

use std::path::PathBuf;

pub use config::ExperimentConfig;
pub use output::{write_outputs, RunSummary, METRICS_HEADER};
pub use presets::{preset, preset_names};
pub use runner::{run_experiment, RunResult};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("missing `{key}`: {message}")]
    Missing { key: String, message: String },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown preset `{name}`; available presets:\n{catalog}")]
    UnknownPreset { name: String, catalog: String },
    #[error("bad override `{0}`: expected key=value with a dotted key path")]
    OverrideSyntax(String),
}

impl ConfigError {
    pub(crate) fn missing(key: &str, message: &str) -> Self {
        ConfigError::Missing {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(key: &str, err: fedsim_core::Error) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn invalid_msg(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }
}

/// Applies `key=value` overrides (dotted key paths, YAML values) and
/// re-validates the result against the strict schema.
pub fn apply_overrides(
    cfg: &ExperimentConfig,
    overrides: &[String],
) -> Result<ExperimentConfig, ConfigError> {
    use serde_yaml::{Mapping, Value};

    let mut root = serde_yaml::to_value(cfg).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .filter(|(k, _)| !k.is_empty() && k.split('.').all(|p| !p.is_empty()))
            .ok_or_else(|| ConfigError::OverrideSyntax(item.clone()))?;
        let value: Value = serde_yaml::from_str(raw).map_err(|e| ConfigError::Invalid {
            key: path.into(),
            message: format!("cannot parse override value `{raw}`: {e}"),
        })?;
        let mut node = &mut root;
        for part in path.split('.') {
            if !node.is_mapping() {
                if node.is_null() {
                    *node = Value::Mapping(Mapping::new());
                } else {
                    return Err(ConfigError::invalid_msg(
                        path,
                        format!("`{part}` is not inside a section"),
                    ));
                }
            }
            let map = node.as_mapping_mut().expect("mapping");
            node = map.entry(Value::String(part.into())).or_insert(Value::Null);
        }
        *node = value;
    }
    let cfg: ExperimentConfig =
        serde_yaml::from_value(root).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
