//! The flat run configuration shared by every subcommand.

use std::path::Path;

use anyhow::{Context, Result};
use nanoseg::eval::{default_thresholds, ThresholdChoice};
use nanoseg::models::ModelSpec;
use nanoseg::particles::Connectivity;
use nanoseg::pseudolabel::PseudoLabelParams;
use nanoseg::synth::SynthConfig;
use nanoseg::train::{GridEntry, TrainConfig};
use serde::{Deserialize, Serialize};

/// Name of the resolved-config echo written into every output directory.
pub const ECHO_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Ascending thresholds for `eval` sweeps.
    pub thresholds: Vec<f64>,
    /// Threshold for `infer`: a number in [0, 1] or `"otsu"`.
    pub infer_threshold: String,
    /// Bin width (pixels) of the aggregate size distribution.
    pub size_bin_width: f64,
    pub connectivity: Connectivity,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(),
            infer_threshold: "0.7".into(),
            size_bin_width: 2.0,
            connectivity: Connectivity::Eight,
        }
    }
}

impl EvalConfig {
    pub fn threshold_choice(&self) -> Result<ThresholdChoice> {
        self.infer_threshold
            .parse()
            .with_context(|| format!("bad infer_threshold `{}`", self.infer_threshold))
    }
}

/// Every field is optional; missing ones take their documented defaults
/// and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset seed for `synth` (scene seeds start here) and split seed
    /// for directories without a manifest.
    pub seed: u64,
    /// Number of scenes `synth` generates.
    pub count: usize,
    pub synth: SynthConfig,
    pub label: PseudoLabelParams,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Ablation grid for `train --grid` when no grid file is given.
    pub grid: Option<Vec<GridEntry>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 10,
            synth: SynthConfig::default(),
            label: PseudoLabelParams::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            grid: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    /// `--seed` drives both the dataset seed and the training seed.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = s;
            self.train.seed = s;
        }
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(dir.join(ECHO_FILE), text).context("writing config echo")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::load(None).unwrap();
        cfg.apply_seed(Some(9));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.eval.thresholds.len(), 19);
    }
}
