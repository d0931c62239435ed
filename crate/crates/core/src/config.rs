//! JSON configuration shared by the CLI and the service.
//!
//! The file is resolved from `--config <file>`, then the `BRAINS_CONFIG`
//! environment variable; with neither, defaults apply. Every section and key
//! is optional. Top-level keys:
//!
//! | key          | contents                                                   |
//! |--------------|------------------------------------------------------------|
//! | `seed`       | base seed; overrides corpus, split and training seeds       |
//! | `generator`  | synthetic cohort settings (`n`, `mix`, `noise`, …)          |
//! | `split`      | `{ "ratios": [train, val, test], "seed": u64 }`             |
//! | `model`      | encoder, `d_k`, `shared_kv`, `k`, `n1`, `threshold`, `seed` |
//! | `train`      | optimiser and masking settings                              |
//! | `experiment` | `{ "variants": [...], "record_timing": bool }`              |
//! | `remote`     | chat-completion backend and prompt template                 |
//! | `service`    | port, bind address, CORS origins, bearer token, artifacts   |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::casemodel::GeneratorConfig;
use crate::diagnose::{ModelConfig, RemoteConfig, TrainConfig};
use crate::eval::{ExperimentConfig, Variant};

pub const CONFIG_ENV: &str = "BRAINS_CONFIG";
pub const DEFAULT_PORT: u16 = 8750;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratios: [0.8, 0.1, 0.1], seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub variants: Vec<Variant>,
    pub record_timing: bool,
    /// Learning rate for experiment training runs.
    pub learning_rate: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        Self { variants: d.variants, record_timing: false, learning_rate: d.train.learning_rate }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Origins allowed by CORS (exact match).
    pub cors_origins: Vec<String>,
    /// When set, `/v1/*` requests other than `/v1/schema` need `Authorization: Bearer <token>`.
    pub bearer_token: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub backend: BackendChoice,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            cors_origins: vec!["http://localhost:5173".into(), "http://127.0.0.1:5173".into()],
            bearer_token: None,
            checkpoint: None,
            index: None,
            corpus: None,
            backend: BackendChoice::Local,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrainsConfig {
    pub seed: Option<u64>,
    pub generator: GeneratorConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    pub remote: Option<RemoteConfig>,
    pub service: ServiceConfig,
}

impl BrainsConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Invalid { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text, path)
    }

    /// Load from `explicit`, else from `$BRAINS_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        match explicit.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) {
            Some(p) => Self::load(&p),
            None => Ok(Self::default()),
        }
    }

    /// Apply a base seed to every seeded stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.split.seed = s;
            self.train.seed = s;
        }
        self
    }

    /// Seed for corpus generation.
    pub fn corpus_seed(&self) -> u64 {
        self.seed.unwrap_or(42)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            variants: self.experiment.variants.clone(),
            corpus_seed: self.corpus_seed(),
            generator: self.generator.clone(),
            split: self.split.ratios,
            split_seed: self.split.seed,
            model: self.model.clone(),
            train: TrainConfig { learning_rate: self.experiment.learning_rate, ..self.train.clone() },
            remote: self.remote.clone(),
            record_timing: self.experiment.record_timing,
        }
    }
}
