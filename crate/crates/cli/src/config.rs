use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vibre::corpus::{BiasSpec, LabelSet, SplitSizes};
use vibre::model::ModelConfig;
use vibre::training::{Method, TrainConfig};
use vibre::{Error, Result};

/// Model shape. The seed comes from `seeds` and `beta` from `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub max_sequence_length: usize,
    pub dropout: f64,
    pub embedding_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ffn_width: m.ffn_width,
            max_sequence_length: m.max_sequence_length,
            dropout: m.dropout,
            embedding_std: m.embedding_std,
        }
    }
}

/// Optimization settings shared by every (method, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            beta: t.beta,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Examples per split that get an occlusion attribution.
    pub attribution_samples: usize,
    pub percentages: Vec<u32>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            attribution_samples: 5,
            percentages: (1..=10).map(|p| p * 10).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub corpus: BiasSpec,
    pub sizes: SplitSizes,
    pub model: ModelSection,
    pub train: TrainSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            seeds: vec![1, 2, 3],
            methods: Method::ALL.to_vec(),
            corpus: BiasSpec::default(),
            sizes: SplitSizes::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub method: Option<Method>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = vibre::io::read_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(m) = o.method {
            self.methods = vec![m];
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        self.corpus.validate()?;
        self.sizes.validate()?;
        self.model_config(self.seeds[0]).validate()?;
        self.train_config(self.methods[0], self.seeds[0]).validate()
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ffn_width: m.ffn_width,
            max_sequence_length: m.max_sequence_length,
            n_relations: LabelSet::default().len(),
            dropout: m.dropout,
            beta: self.train.beta,
            seed,
            embedding_std: m.embedding_std,
        }
    }

    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method,
            beta: t.beta,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            seed,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn run_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.out_dir.join("runs").join(format!("{method}-seed{seed}"))
    }
}
