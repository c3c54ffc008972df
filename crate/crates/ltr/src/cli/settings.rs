//! Effective run configuration: built-in defaults, overlaid by an optional
//! flat `key = value` config file, overlaid by command-line flags. Unknown
//! keys are rejected.

use std::path::PathBuf;

use crate::model::{
    encoder_kinds_string, parse_encoder_kinds, EncoderKind, ModelConfig, ScorerVariant,
};
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeKind {
    None,
    QueryMinMax,
}

impl NormalizeKind {
    pub fn token(self) -> &'static str {
        match self {
            NormalizeKind::None => "none",
            NormalizeKind::QueryMinMax => "query-minmax",
        }
    }

    pub fn from_token(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(NormalizeKind::None),
            "query-minmax" => Ok(NormalizeKind::QueryMinMax),
            other => Err(format!("unknown normalization {other:?} (expected none or query-minmax)")),
        }
    }
}

/// Everything a subcommand can be configured with.
#[derive(Debug, Clone)]
pub struct Settings {
    pub variant: ScorerVariant,
    pub encoders: Vec<EncoderKind>,
    pub hidden_dim: usize,
    pub seed: u64,
    pub normalize: NormalizeKind,
    pub k_max_floor: u32,

    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,

    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub qid: Option<String>,

    pub synth_queries: usize,
    pub synth_valid_queries: usize,
    pub synth_test_queries: usize,
    pub synth_docs_per_query: usize,
    pub synth_features: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            variant: ScorerVariant::ListNetRsa,
            encoders: EncoderKind::ALL.to_vec(),
            hidden_dim: 64,
            seed: 42,
            normalize: NormalizeKind::None,
            k_max_floor: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            train_path: None,
            valid_path: None,
            test_path: None,
            model_path: None,
            out_dir: None,
            qid: None,
            synth_queries: 200,
            synth_valid_queries: 50,
            synth_test_queries: 50,
            synth_docs_per_query: 20,
            synth_features: 10,
        }
    }
}

impl Settings {
    /// Overlay values from flat `key = value` text. Lines are trimmed;
    /// blanks and `#` comments are skipped; unknown keys are errors.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), String> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key = value", idx + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("config line {}: {e}", idx + 1))?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value for {key}: {value:?}"))
        }
        match key {
            "variant" => self.variant = ScorerVariant::from_token(value).map_err(|e| e.to_string())?,
            "encoders" => self.encoders = parse_encoder_kinds(value).map_err(|e| e.to_string())?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "normalize" => self.normalize = NormalizeKind::from_token(value)?,
            "k_max_floor" => self.k_max_floor = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "optimizer" => {
                self.optimizer = OptimizerKind::from_token(value).map_err(|e| e.to_string())?
            }
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "train_path" => self.train_path = Some(PathBuf::from(value)),
            "valid_path" => self.valid_path = Some(PathBuf::from(value)),
            "test_path" => self.test_path = Some(PathBuf::from(value)),
            "model_path" => self.model_path = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "qid" => self.qid = Some(value.to_string()),
            "synth_queries" => self.synth_queries = num(key, value)?,
            "synth_valid_queries" => self.synth_valid_queries = num(key, value)?,
            "synth_test_queries" => self.synth_test_queries = num(key, value)?,
            "synth_docs_per_query" => self.synth_docs_per_query = num(key, value)?,
            "synth_features" => self.synth_features = num(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Render every effective setting as flat key-value text.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let opt_path = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        };
        let pairs: Vec<(&str, String)> = vec![
            ("variant", self.variant.token().to_string()),
            ("encoders", encoder_kinds_string(&self.encoders)),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("seed", self.seed.to_string()),
            ("normalize", self.normalize.token().to_string()),
            ("k_max_floor", self.k_max_floor.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("optimizer", self.optimizer.token().to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("train_path", opt_path(&self.train_path)),
            ("valid_path", opt_path(&self.valid_path)),
            ("test_path", opt_path(&self.test_path)),
            ("model_path", opt_path(&self.model_path)),
            ("out_dir", opt_path(&self.out_dir)),
            ("qid", self.qid.clone().unwrap_or_default()),
            ("synth_queries", self.synth_queries.to_string()),
            ("synth_valid_queries", self.synth_valid_queries.to_string()),
            ("synth_test_queries", self.synth_test_queries.to_string()),
            ("synth_docs_per_query", self.synth_docs_per_query.to_string()),
            ("synth_features", self.synth_features.to_string()),
        ];
        for (key, value) in pairs {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn model_config(&self, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            hidden_dim: self.hidden_dim,
            variant: self.variant,
            encoders: if self.variant.uses_encoders() { self.encoders.clone() } else { vec![] },
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }
}
