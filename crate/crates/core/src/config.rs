//! Run configuration: a TOML file with strict schema validation, filled
//! defaults, and a canonical dump for manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{PositionScope, ToyAlphabet, ToyConfig, UnembeddingKind};
use crate::probe::{ProbeHyper, Schedule, SweepOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config rejected: {0}")]
    Schema(String),
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

/// Supported backend kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Toy,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub model_id: String,
    pub think_start_token: String,
    pub think_end_token: String,
    /// Script file (JSONL of scripts) for the scripted kind.
    pub scripts: Option<String>,
    pub toy: ToySection,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Toy,
            model_id: "toy-default".to_string(),
            think_start_token: "<think>".to_string(),
            think_end_token: "</think>".to_string(),
            scripts: None,
            toy: ToySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub hidden_size: usize,
    pub layers: usize,
    pub seed: u64,
    pub context_window: usize,
    pub alphabet: ToyAlphabet,
    pub unembedding: UnembeddingKind,
}

impl Default for ToySection {
    fn default() -> Self {
        let c = ToyConfig::default();
        Self {
            hidden_size: c.hidden_size,
            layers: c.layers,
            seed: c.seed,
            context_window: c.context_window,
            alphabet: c.alphabet,
            unembedding: c.unembedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    /// Collection decoding: deterministic by default.
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            seed: 0,
            max_new_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Decoding for steering/evaluation runs.
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            seed: 0,
            max_new_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringSection {
    /// Layer steered by detection/scaling stages.
    pub layer: usize,
    pub alphas: Vec<f64>,
    pub position_scope: PositionScope,
}

impl Default for SteeringSection {
    fn default() -> Self {
        Self {
            layer: 1,
            alphas: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            position_scope: PositionScope::AllPositions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub weight_decay: f64,
    pub ece_bins: usize,
    pub validation_fraction: f64,
    pub standardize: bool,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let h = ProbeHyper::default();
        Self {
            learning_rate: h.learning_rate,
            epochs: h.epochs,
            schedule: h.schedule,
            seed: h.seed,
            weight_decay: h.weight_decay,
            ece_bins: 10,
            validation_fraction: 0.1,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsSection {
    /// Budget-forcing iteration grid.
    pub iterations: Vec<usize>,
}

impl Default for TtsSection {
    fn default() -> Self {
        Self {
            iterations: vec![0, 1, 2],
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub backend: BackendSection,
    pub generation: GenerationSection,
    pub evaluation: EvaluationSection,
    pub steering: SteeringSection,
    pub probe: ProbeSection,
    pub tts: TtsSection,
}

impl Config {
    pub fn probe_hyper(&self) -> ProbeHyper {
        ProbeHyper {
            learning_rate: self.probe.learning_rate,
            epochs: self.probe.epochs,
            schedule: self.probe.schedule,
            seed: self.probe.seed,
            weight_decay: self.probe.weight_decay,
        }
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            hyper: self.probe_hyper(),
            ece_bins: self.probe.ece_bins,
            validation_fraction: self.probe.validation_fraction,
            standardize: self.probe.standardize,
        }
    }

    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            hidden_size: self.backend.toy.hidden_size,
            layers: self.backend.toy.layers,
            seed: self.backend.toy.seed,
            context_window: self.backend.toy.context_window,
            alphabet: self.backend.toy.alphabet,
            unembedding: self.backend.toy.unembedding,
            think_start_token: self.backend.think_start_token.clone(),
            think_end_token: self.backend.think_end_token.clone(),
        }
    }

    pub fn generation_config(&self) -> crate::backend::GenerationConfig {
        crate::backend::GenerationConfig {
            temperature: self.generation.temperature,
            seed: self.generation.seed,
            max_new_tokens: self.generation.max_new_tokens,
            stop_conditions: vec![crate::backend::MarkerKind::EndOfSequence],
        }
    }

    pub fn evaluation_config(&self) -> crate::backend::GenerationConfig {
        crate::backend::GenerationConfig {
            temperature: self.evaluation.temperature,
            seed: self.evaluation.seed,
            max_new_tokens: self.evaluation.max_new_tokens,
            stop_conditions: vec![crate::backend::MarkerKind::EndOfSequence],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let non_negative_finite = |key, value: f64| {
            if value.is_finite() && value >= 0.0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    reason: format!("must be finite and non-negative, got {value}"),
                })
            }
        };
        non_negative_finite("generation.temperature", self.generation.temperature)?;
        non_negative_finite("evaluation.temperature", self.evaluation.temperature)?;
        if self.generation.max_new_tokens == 0 {
            return Err(ConfigError::Invalid {
                key: "generation.max_new_tokens",
                reason: "must be positive".into(),
            });
        }
        if self.evaluation.max_new_tokens == 0 {
            return Err(ConfigError::Invalid {
                key: "evaluation.max_new_tokens",
                reason: "must be positive".into(),
            });
        }
        if !(self.probe.learning_rate.is_finite() && self.probe.learning_rate > 0.0) {
            return Err(ConfigError::Invalid {
                key: "probe.learning_rate",
                reason: format!("must be positive, got {}", self.probe.learning_rate),
            });
        }
        if self.probe.epochs == 0 {
            return Err(ConfigError::Invalid {
                key: "probe.epochs",
                reason: "must be positive".into(),
            });
        }
        if self.probe.ece_bins == 0 {
            return Err(ConfigError::Invalid {
                key: "probe.ece_bins",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.probe.validation_fraction > 0.0 && self.probe.validation_fraction < 1.0) {
            return Err(ConfigError::Invalid {
                key: "probe.validation_fraction",
                reason: format!(
                    "must be inside (0, 1), got {}",
                    self.probe.validation_fraction
                ),
            });
        }
        if self.steering.alphas.is_empty() {
            return Err(ConfigError::Invalid {
                key: "steering.alphas",
                reason: "must list at least one coefficient".into(),
            });
        }
        if self.backend.kind == BackendKind::Scripted && self.backend.scripts.is_none() {
            return Err(ConfigError::Invalid {
                key: "backend.scripts",
                reason: "required when backend.kind = \"scripted\"".into(),
            });
        }
        if self.tts.iterations.is_empty() {
            return Err(ConfigError::Invalid {
                key: "tts.iterations",
                reason: "must list at least one budget".into(),
            });
        }
        Ok(())
    }

    /// Canonical TOML snapshot: defaults materialized, keys in struct order.
    pub fn dump(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse, fill defaults, and validate. Unknown keys are rejected with the
/// offending key named.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let body = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config(&body)
}

pub fn parse_config(body: &str) -> Result<Config, ConfigError> {
    let config: Config = toml::from_str(body).map_err(|e| ConfigError::Schema(e.to_string()))?;
    config.validate()?;
    Ok(config)
}
