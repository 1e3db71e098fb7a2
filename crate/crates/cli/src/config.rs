//! The run configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tcnf::conditioners::{EncoderConfig, EncoderKind};
use tcnf::data::ScenarioSpec;
use tcnf::flow::{ConditionerConfig, ModelConfig};
use tcnf::hyperopt::{Objective, SearchConfig};
use tcnf::train::TrainConfig;

/// Name of the resolved config written next to every command's outputs.
pub const RESOLVED_CONFIG: &str = "config.toml";

/// Everything a run depends on. Command-line flags override file values;
/// the top-level `seed` also replaces `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub coupling_layers: usize,
    /// VUS buffer; the median labeled range length when unset.
    pub metric_window: Option<usize>,
    pub data: ScenarioSpec,
    pub conditioner: ConditionerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub search: SearchSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            coupling_layers: 4,
            metric_window: None,
            data: ScenarioSpec::default(),
            conditioner: ConditionerConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            search: SearchSection::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub objective: Objective,
    pub budget: usize,
    pub population: Option<usize>,
    pub sigma0: f64,
    pub restarts: bool,
    pub max_lookback: usize,
    pub candidate_epochs: usize,
    /// Narrowed `[lower, upper]` ranges by parameter name.
    pub overrides: BTreeMap<String, [f64; 2]>,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        Self {
            objective: d.objective,
            budget: d.budget,
            population: d.population,
            sigma0: d.sigma0,
            restarts: d.restarts,
            max_lookback: d.max_lookback,
            candidate_epochs: d.candidate_epochs,
            overrides: d.overrides,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn set_method(&mut self, kind: EncoderKind) {
        self.encoder.kind = kind;
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            dim,
            coupling_layers: self.coupling_layers,
            conditioner: self.conditioner.clone(),
            encoder: self.encoder.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            method: self.encoder.kind,
            objective: s.objective,
            budget: s.budget,
            seed: self.seed,
            population: s.population,
            sigma0: s.sigma0,
            restarts: s.restarts,
            max_lookback: s.max_lookback,
            candidate_epochs: s.candidate_epochs,
            train: self.train_config(),
            lstm_hidden: self.encoder.lstm_hidden,
            overrides: s.overrides.clone(),
            metric_window: self.metric_window,
        }
    }

    /// Copies the architecture of a trained model into the config.
    pub fn adopt_model(&mut self, model: &ModelConfig) {
        self.coupling_layers = model.coupling_layers;
        self.conditioner = model.conditioner.clone();
        self.encoder = model.encoder.clone();
    }

    /// Writes the resolved config into the output directory.
    pub fn write_resolved(&self) -> Result<()> {
        let mut resolved = self.clone();
        resolved.train.seed = self.seed;
        let text = toml::to_string(&resolved).context("cannot serialize the resolved config")?;
        let path = self.out_dir().join(RESOLVED_CONFIG);
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
