use std::path::{Path, PathBuf};

use scformer::attention::Variant;
use scformer::data::SplitSpec;
use scformer::model::{ModelConfig, Precision};
use scformer::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// CSV path; relative paths resolve against the config file's directory.
    pub path: PathBuf,
    #[serde(default = "default_date_column")]
    pub date_column: String,
    /// Channel columns in order; all non-date columns when absent.
    #[serde(default)]
    pub channels: Option<Vec<String>>,
}

fn default_date_column() -> String {
    "date".into()
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Everything a command needs, read from one JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Seeds initialization and shuffling; copied into `train.seed`.
    #[serde(default)]
    pub seed: u64,
}

/// Command line values that take precedence over the file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Replace the cumulative history state with zeros.
    #[arg(long)]
    pub no_hippo: bool,
    /// Replace the normalized look-back window with zeros.
    #[arg(long)]
    pub no_lookback: bool,
    /// Use dense transforms instead of structured ones.
    #[arg(long)]
    pub no_constraints: bool,
}

impl RunConfig {
    pub fn load(path: &Path, o: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::ConfigIo {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
        if cfg.dataset.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset.path = dir.join(&cfg.dataset.path);
            }
        }
        cfg.apply(o);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(p) = o.precision {
            self.model.precision = p;
        }
        if let Some(v) = o.variant {
            self.model.variant = v;
        }
        self.model.use_hippo &= !o.no_hippo;
        self.model.use_lookback &= !o.no_lookback;
        self.model.constrained &= !o.no_constraints;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model
            .validate()
            .map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
        if let Some(ch) = &self.dataset.channels {
            if ch.len() != self.model.channels {
                return Err(CliError::ConfigInvalid(format!(
                    "dataset lists {} channels but model.channels is {}",
                    ch.len(),
                    self.model.channels
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"dataset": {"path": "data.csv"}}"#;

    #[test]
    fn defaults_fill_everything_but_the_dataset() {
        let cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.dataset.date_column, "date");
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.seed, 0);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"dataset": {"path": "a"}, "epochs": 3}"#,
            r#"{"dataset": {"path": "a", "sep": ";"}}"#,
            r#"{"dataset": {"path": "a"}, "model": {"dmodel": 3}}"#,
            r#"{"dataset": {"path": "a"}, "train": {"lr": 3}}"#,
            r#"{"dataset": {"path": "a"}, "split": {"kind": "ratio", "train": 0.7, "val": 0.1, "test": 0.2, "x": 1}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(text).is_err(), "{text}");
        }
    }

    #[test]
    fn flags_override_the_file() {
        let mut cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        cfg.apply(&Overrides {
            seed: Some(7),
            variant: Some(Variant::Conv),
            precision: Some(Precision::F64),
            no_hippo: true,
            ..Overrides::default()
        });
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.model.variant, Variant::Conv);
        assert_eq!(cfg.model.precision, Precision::F64);
        assert!(!cfg.model.use_hippo && cfg.model.use_lookback && cfg.model.constrained);
    }

    #[test]
    fn channel_count_must_agree() {
        let text =
            r#"{"dataset": {"path": "a", "channels": ["x", "y"]}, "model": {"channels": 3}}"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::ConfigInvalid(_))));
    }
}
