//! TOML experiment configuration. Every section is optional and falls back
//! to the defaults of the corresponding module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scenario::{parse_scenario, ScenarioSpec};
use crate::destructor::GridSpec;
use crate::error::{GdaError, Result};
use crate::estimator::{ClusterConfig, EncoderSpec, SslConfig};
use crate::rng::derive;
use crate::synthgen::SynthConfig;
use crate::trainer::{ClassifierSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest to load; when absent the `synth` block is generated.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Held-out share of every (class, domain) cell.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: SynthConfig::default(),
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Split string, e.g. `"d0(0-1), d1(2-3)"`.
    pub split: String,
    pub labeled_fraction: f64,
    pub hide_domain_labels: bool,
    /// Optional names for domain ids, index = id; otherwise `d<N>`.
    pub domain_names: Vec<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            split: "d0(0-1), d1(2-3)".into(),
            labeled_fraction: 1.0,
            hide_domain_labels: true,
            domain_names: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn spec(&self) -> Result<ScenarioSpec> {
        let mut spec = parse_scenario(&self.split)?;
        spec.labeled_fraction = self.labeled_fraction;
        spec.hide_domain_labels = self.hide_domain_labels;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub grids: Vec<usize>,
    pub cluster_counts: Vec<usize>,
    /// Also train and evaluate a classifier for every cluster count.
    pub train_per_count: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grids: vec![1, 2, 4, 8],
            cluster_counts: (2..=8).collect(),
            train_per_count: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Single source of randomness; per-stage seeds are derived from it and
    /// override any `seed` set inside the sections.
    pub seed: u64,
    pub data: DataConfig,
    pub scenario: ScenarioConfig,
    pub encoder: EncoderSpec,
    pub ssl: SslConfig,
    pub cluster: ClusterConfig,
    pub classifier: ClassifierSpec,
    pub train: TrainConfig,
    /// Also train the labeled-only model with entropy rejection.
    pub baseline: bool,
    pub plots: bool,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            scenario: ScenarioConfig::default(),
            encoder: EncoderSpec::default(),
            ssl: SslConfig::default(),
            cluster: ClusterConfig::default(),
            classifier: ClassifierSpec::default(),
            train: TrainConfig::default(),
            baseline: true,
            plots: true,
            sweep: SweepConfig::default(),
        }
    }
}

pub(crate) mod stage_seed {
    pub const SYNTH: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const SCENARIO: u64 = 3;
    pub const SSL: u64 = 4;
    pub const GMM: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const BASELINE: u64 = 7;
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        Ok(cfg)
    }

    /// Load a config; a relative `data.manifest` is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GdaError::Config(e.to_string()))
    }

    pub fn stage_seed(&self, stage: u64) -> u64 {
        derive(self.seed, &[stage])
    }

    /// Copy with every stage seed derived from `seed`.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.data.synth.seed = self.stage_seed(stage_seed::SYNTH);
        c.ssl.seed = self.stage_seed(stage_seed::SSL);
        c.cluster.gmm.seed = self.stage_seed(stage_seed::GMM);
        c.train.seed = self.stage_seed(stage_seed::TRAIN);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let tf = self.data.test_fraction;
        if !(0.0..1.0).contains(&tf) {
            return Err(GdaError::Config(format!("test_fraction must be in [0, 1), got {tf}")));
        }
        if self.data.manifest.is_none() {
            self.data.synth.validate().map_err(|e| GdaError::Config(format!("synth: {e}")))?;
        }
        self.scenario.spec()?;
        self.encoder.validate()?;
        self.ssl.validate()?;
        self.classifier.validate()?;
        self.train.validate()?;
        for &g in &self.sweep.grids {
            GridSpec::new(g)?;
        }
        if self.sweep.cluster_counts.contains(&0) {
            return Err(GdaError::Config("cluster counts must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 9;
        cfg.train.epochs = 5;
        cfg.scenario.split = "d0(0), d1(1)".into();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml("sede = 1").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3").is_err());
        let cfg = ExperimentConfig::from_toml("[data]\ntest_fraction = 1.5").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::from_toml("[scenario]\nsplit = \"d0(\"").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seeds_derive_from_the_global_seed() {
        let a = ExperimentConfig { seed: 1, ..Default::default() }.seeded();
        let b = ExperimentConfig { seed: 2, ..Default::default() }.seeded();
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.ssl.seed, a.train.seed);
        assert_eq!(a, ExperimentConfig { seed: 1, ..Default::default() }.seeded());
    }
}
