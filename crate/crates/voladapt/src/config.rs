//! Pipeline-wide configuration.
//!
//! One JSON file holds one section per module, every field defaulted, so an
//! empty file (or none at all) is a valid config. Subcommands can swap in a
//! whole section from its own file and then apply flat dotted-key overrides
//! (`--set train.base_lr=0.001`), which always win. Unknown keys anywhere are
//! errors, so typos fail fast instead of silently running the defaults.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::ModelConfig;
use crate::preprocess::PreprocessConfig;
use crate::pseudo::PseudoLabelConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid override `{0}`: {1}")]
    BadOverride(String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pseudo: PseudoLabelConfig,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    /// Validates every section with its own rules.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.preprocess.validate().map_err(|e| invalid(&e))?;
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.pseudo.validate().map_err(|e| invalid(&e))?;
        self.synth.validate().map_err(|e| invalid(&e))?;
        Ok(())
    }
}

/// Where a config is assembled from, in increasing precedence: the defaults,
/// one whole-pipeline file, per-section replacement files, dotted overrides.
#[derive(Debug, Default)]
pub struct ConfigSources<'a> {
    pub file: Option<&'a Path>,
    /// `(section name, file)` pairs; the file replaces that section wholesale.
    pub sections: Vec<(&'static str, &'a Path)>,
    /// `key.path=json-value` strings.
    pub overrides: &'a [String],
}

fn read_json(path: &Path) -> Result<serde_json::Value, ConfigError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn apply_override(tree: &mut serde_json::Value, item: &str) -> Result<(), ConfigError> {
    let bad = |why: &str| ConfigError::BadOverride(item.to_string(), why.to_string());
    let (key, raw_value) = item
        .split_once('=')
        .ok_or_else(|| bad("expected key.path=value"))?;
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(bad("empty path segment"));
    }
    // Values are JSON; bare words that aren't valid JSON become strings, so
    // `--set preprocess.interpolation=nearest` works without inner quotes.
    let value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));

    let mut node = tree;
    for segment in &segments[..segments.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| bad("path walks through a non-object value"))?
            .entry(segment.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    node.as_object_mut()
        .ok_or_else(|| bad("path walks through a non-object value"))?
        .insert(segments.last().unwrap().to_string(), value);
    Ok(())
}

/// Assembles the effective config. Missing pieces take their defaults; every
/// layer is JSON so `deny_unknown_fields` screens the final result.
pub fn load_config(sources: &ConfigSources) -> Result<PipelineConfig, ConfigError> {
    let mut tree = match sources.file {
        Some(path) => read_json(path)?,
        None => serde_json::json!({}),
    };
    if !tree.is_object() {
        return Err(ConfigError::Invalid(
            "top-level config must be a JSON object".to_string(),
        ));
    }
    for (section, path) in &sources.sections {
        let value = read_json(path)?;
        tree.as_object_mut()
            .expect("checked above")
            .insert((*section).to_string(), value);
    }
    for item in sources.overrides {
        apply_override(&mut tree, item)?;
    }
    Ok(serde_json::from_value(tree)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sources_yield_the_defaults() {
        let cfg = load_config(&ConfigSources::default()).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn file_sections_and_overrides_stack_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("pipeline.json");
        std::fs::write(
            &base,
            r#"{"train": {"epochs": 50, "base_lr": 0.01}, "synth": {"seed": 3}}"#,
        )
        .unwrap();
        let train_file = dir.path().join("train.json");
        std::fs::write(&train_file, r#"{"epochs": 20}"#).unwrap();

        let overrides = vec!["train.epochs=7".to_string(), "synth.shift=0.5".to_string()];
        let cfg = load_config(&ConfigSources {
            file: Some(&base),
            sections: vec![("train", &train_file)],
            overrides: &overrides,
        })
        .unwrap();

        // The section file replaced the whole train section (base_lr back to
        // default), then the override took epochs.
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.base_lr, TrainConfig::default().base_lr);
        assert_eq!(cfg.synth.seed, 3);
        assert_eq!(cfg.synth.shift, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"trian": {}}"#).unwrap();
        assert!(matches!(
            load_config(&ConfigSources {
                file: Some(&path),
                ..ConfigSources::default()
            }),
            Err(ConfigError::Json(_))
        ));

        let overrides = vec!["train.epochz=1".to_string()];
        assert!(load_config(&ConfigSources {
            overrides: &overrides,
            ..ConfigSources::default()
        })
        .is_err());
    }

    #[test]
    fn override_values_parse_as_json_with_string_fallback() {
        let overrides = vec![
            "train.milestones=[0.5,0.9]".to_string(),
            "preprocess.interpolation=nearest".to_string(),
            "synth.shape=[8,16,16]".to_string(),
        ];
        let cfg = load_config(&ConfigSources {
            overrides: &overrides,
            ..ConfigSources::default()
        })
        .unwrap();
        assert_eq!(cfg.train.milestones, vec![0.5, 0.9]);
        assert_eq!(
            cfg.preprocess.interpolation,
            crate::preprocess::Interpolation::Nearest
        );
        assert_eq!(cfg.synth.shape, [8, 16, 16]);
    }

    #[test]
    fn malformed_overrides_are_rejected() {
        for item in ["no-equals", ".=1", "train..epochs=1"] {
            let overrides = vec![item.to_string()];
            assert!(
                matches!(
                    load_config(&ConfigSources {
                        overrides: &overrides,
                        ..ConfigSources::default()
                    }),
                    Err(ConfigError::BadOverride(_, _))
                ),
                "{item} should be rejected"
            );
        }
    }

    #[test]
    fn effective_config_round_trips_through_a_file() {
        let overrides = vec!["train.epochs=5".to_string(), "model.embed_dim=64".to_string()];
        let cfg = load_config(&ConfigSources {
            overrides: &overrides,
            ..ConfigSources::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("effective.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
        let reloaded = load_config(&ConfigSources {
            file: Some(&path),
            ..ConfigSources::default()
        })
        .unwrap();
        assert_eq!(reloaded, cfg);
    }

    #[test]
    fn section_validation_failures_surface() {
        let overrides = vec!["train.base_lr=0".to_string()];
        let cfg = load_config(&ConfigSources {
            overrides: &overrides,
            ..ConfigSources::default()
        })
        .unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }
}
