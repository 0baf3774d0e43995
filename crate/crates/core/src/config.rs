//! Declarative run configuration: every tunable of every stage, loadable from
//! TOML. Unknown keys are rejected and everything is validated up front.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregationConfig, UncertaintyChannel};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::geometry::GridSpec;
use crate::micronet::{ArchConfig, TrainConfig};
use crate::synth::{DatasetConfig, SimulatorConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Monte Carlo passes per image.
    pub passes: usize,
    /// When false a single dropout-free pass is run.
    pub mc_dropout: bool,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            passes: 10,
            mc_dropout: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub prob_grid: Vec<f64>,
    pub unc_grid: Vec<f64>,
    pub percentiles: Vec<f64>,
    pub channel: UncertaintyChannel,
    pub hist_bins: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            prob_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            unc_grid: (1..=20).map(|i| i as f64 * 0.05).collect(),
            percentiles: (50..=100).step_by(2).map(|p| p as f64).collect(),
            channel: UncertaintyChannel::Avg,
            hist_bins: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub dataset: DatasetConfig,
    pub simulator: SimulatorConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub aggregation: AggregationConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.dataset.style.validate()?;
        if self.dataset.objects.0 > self.dataset.objects.1 || self.dataset.decoys.0 > self.dataset.decoys.1 {
            return Err(Error::Config("dataset count ranges must be ordered".into()));
        }
        self.simulator.validate()?;
        if self.arch.channels == 0 || !(0.0..1.0).contains(&self.arch.dropout) {
            return Err(Error::Config("arch needs channels >= 1 and dropout in [0, 1)".into()));
        }
        self.train.validate()?;
        if self.infer.passes == 0 {
            return Err(Error::Config("infer.passes must be >= 1".into()));
        }
        self.aggregation.validate()?;
        self.eval.validate()?;
        let s = &self.sweep;
        if s.prob_grid.is_empty() || s.unc_grid.is_empty() || s.percentiles.is_empty() {
            return Err(Error::Config("sweep grids must be non-empty".into()));
        }
        if s.prob_grid.iter().chain(&s.unc_grid).any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("sweep thresholds must be >= 0".into()));
        }
        if s.hist_bins == 0 {
            return Err(Error::Config("sweep.hist_bins must be >= 1".into()));
        }
        if s.percentiles.iter().any(|p| !(*p > 0.0 && *p <= 100.0)) {
            return Err(Error::Config("percentiles must lie in (0, 100]".into()));
        }
        Ok(())
    }
}
