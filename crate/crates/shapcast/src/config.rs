//! The run configuration consumed by every subcommand.
//!
//! One JSON file describes a whole run: input paths, indicator windows,
//! group count, walk-forward span, training hyperparameters, attribution
//! settings, and the synthetic-data recipe. Every section has defaults,
//! so a config file only states what it overrides. Unknown keys are
//! rejected rather than ignored.

use crate::error::{Error, Result};
use crate::forecaster::{TrainConfig, Variant};
use crate::market_data::IndicatorConfig;
use crate::shapley::ValueMode;
use crate::synth::SynthSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where inputs live and outputs go. Relative paths resolve against the
/// working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub price_csv: PathBuf,
    /// wide CSV of exogenous series; optional
    pub macro_csv: Option<PathBuf>,
    pub embeddings_jsonl: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            price_csv: "data/prices.csv".into(),
            macro_csv: None,
            embeddings_jsonl: "data/embeddings.jsonl".into(),
            out_dir: "out".into(),
        }
    }
}

/// Group count for the main runs and the sweep bounds for `sensitivity`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    pub n_groups: usize,
    pub sweep_min: usize,
    pub sweep_max: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            n_groups: 5,
            sweep_min: 1,
            sweep_max: 9,
        }
    }
}

/// Walk-forward span. Years left unset are taken from the data itself.
/// `window_index` selects which window the single-window commands
/// (`group`, `train`, `predict`, `explain`, `bench-shap`) operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct WindowsConfig {
    pub first_year: Option<i32>,
    pub last_year: Option<i32>,
    pub window_index: usize,
}

/// How masked groups are imputed. Training-period column means are the
/// only policy implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePolicy {
    TrainMean,
}

/// Attribution settings shared by `explain` and `bench-shap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub mode: ValueMode,
    pub baseline: BaselinePolicy,
    /// permutations per instance for the sampled estimator
    pub budget: usize,
    /// cap on test dates attributed by `explain`; unset means all
    pub explain_limit: Option<usize>,
    /// how many test instances `bench-shap` times
    pub bench_instances: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            mode: ValueMode::Prediction,
            baseline: BaselinePolicy::TrainMean,
            budget: 10,
            explain_limit: None,
            bench_instances: 1,
        }
    }
}

/// The whole run, one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataPaths,
    pub indicators: IndicatorConfig,
    pub grouping: GroupingConfig,
    pub windows: WindowsConfig,
    pub train: TrainConfig,
    /// which variant the `train` subcommand fits
    pub variant: Variant,
    pub attribution: AttributionConfig,
    pub synth: SynthSpec,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataPaths::default(),
            indicators: IndicatorConfig::default(),
            grouping: GroupingConfig::default(),
            windows: WindowsConfig::default(),
            train: TrainConfig::default(),
            variant: Variant::Full,
            attribution: AttributionConfig::default(),
            synth: SynthSpec::default(),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.grouping.n_groups == 0 {
            return Err(Error::Config("grouping.n_groups must be at least 1".into()));
        }
        if self.grouping.sweep_min == 0 || self.grouping.sweep_max < self.grouping.sweep_min {
            return Err(Error::Config(format!(
                "grouping sweep range {}..={} is empty or starts at zero",
                self.grouping.sweep_min, self.grouping.sweep_max
            )));
        }
        if self.attribution.budget < 2 {
            return Err(Error::Config(
                "attribution.budget must be at least 2 for an uncertainty estimate".into(),
            ));
        }
        if self.attribution.bench_instances == 0 {
            return Err(Error::Config(
                "attribution.bench_instances must be at least 1".into(),
            ));
        }
        if let (Some(a), Some(b)) = (self.windows.first_year, self.windows.last_year) {
            if b < a {
                return Err(Error::Config(format!(
                    "windows span {a}..{b} is backwards"
                )));
            }
        }
        Ok(())
    }

    /// Checks that every path a command is about to read exists.
    pub fn require_inputs(&self, need_macro: bool, need_docs: bool) -> Result<()> {
        let mut missing: Vec<String> = Vec::new();
        if !self.data.price_csv.exists() {
            missing.push(self.data.price_csv.display().to_string());
        }
        if need_macro {
            if let Some(m) = &self.data.macro_csv {
                if !m.exists() {
                    missing.push(m.display().to_string());
                }
            }
        }
        if need_docs && !self.data.embeddings_jsonl.exists() {
            missing.push(self.data.embeddings_jsonl.display().to_string());
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "missing input files: {}",
                missing.join(", ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_partial_files_override() {
        let d = RunConfig::default();
        d.validate().unwrap();
        assert_eq!(d.grouping.n_groups, 5);
        assert_eq!(d.attribution.budget, 10);

        let cfg: RunConfig = serde_json::from_str(
            r#"{"seed": 7, "grouping": {"n_groups": 3}, "train": {"epochs": 2}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.grouping.n_groups, 3);
        assert_eq!(cfg.grouping.sweep_max, 9);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.hidden_size, TrainConfig::default().hidden_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"grouping": {"n_grps": 3}}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(r#"{"typo_section": {}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn bad_settings_are_named() {
        let mut cfg = RunConfig::default();
        cfg.attribution.budget = 1;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("budget"));

        let mut cfg = RunConfig::default();
        cfg.grouping.sweep_min = 4;
        cfg.grouping.sweep_max = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
