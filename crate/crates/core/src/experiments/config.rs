use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{CsvSchema, DgpFamily, DgpParams, ZMode};
use crate::error::{Error, Result};
use crate::permutation::TestConfig;
use crate::statistics::StatisticKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    FitConvergence,
    PowerCurve,
    Calibration,
    SingleTest,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::FitConvergence => "fit_convergence",
            Suite::PowerCurve => "power_curve",
            Suite::Calibration => "calibration",
            Suite::SingleTest => "single_test",
        }
    }
}

/// Everything a suite needs. Every command-line flag has a field here, so a
/// TOML file can stand in for any flag combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: Suite,
    pub dgp: DgpFamily,
    pub params: DgpParams,
    /// Sample size of the power-curve and simulated single-test runs.
    pub n: usize,
    pub csv: Option<PathBuf>,
    pub schema: CsvSchema,
    pub statistics: Vec<StatisticKind>,
    pub n_grid: Vec<usize>,
    pub beta_grid: Vec<f64>,
    pub z_modes: Vec<ZMode>,
    pub replicates: usize,
    pub test: TestConfig,
    pub alpha: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub oracle_draws: usize,
    /// Fraction of CSV rows kept per calibration replicate.
    pub subsample: f64,
    pub threads: Option<usize>,
    /// Write measured runtimes; zeros otherwise (byte-identical reruns).
    pub record_runtime: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            suite: Suite::PowerCurve,
            dgp: DgpFamily::DgpEffect,
            params: DgpParams::default(),
            n: 500,
            csv: None,
            schema: CsvSchema::default(),
            statistics: vec![
                StatisticKind::Date,
                StatisticKind::DrDate,
                StatisticKind::Dett,
                StatisticKind::DrDett,
            ],
            n_grid: vec![100, 200, 400, 800, 1600],
            beta_grid: vec![0.0, 0.5, 1.0, 2.0, 3.0],
            z_modes: vec![ZMode::One, ZMode::Bernoulli, ZMode::Uniform],
            replicates: 50,
            test: TestConfig::default(),
            alpha: 0.05,
            seed: 0,
            output_dir: PathBuf::from("results"),
            oracle_draws: 100_000,
            subsample: 0.8,
            threads: None,
            record_runtime: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.statistics.is_empty() && self.suite != Suite::FitConvergence {
            return bad("no statistics selected");
        }
        if self.test.plan.m == 0 {
            return bad("m must be at least 1");
        }
        if !(self.test.plan.train_ratio > 0.0 && self.test.plan.train_ratio < 1.0) {
            return bad("train ratio must lie in (0, 1)");
        }
        if self.test.controls_per_set == 0 {
            return bad("controls per set must be positive");
        }
        match self.suite {
            Suite::FitConvergence => {
                if self.n_grid.is_empty() {
                    return bad("n grid is empty");
                }
                if self.n_grid.iter().any(|&n| n < 8) {
                    return bad("every n in the grid must be at least 8");
                }
                if self.oracle_draws == 0 {
                    return bad("oracle sample is empty");
                }
            }
            Suite::PowerCurve => {
                if self.beta_grid.is_empty() || self.z_modes.is_empty() {
                    return bad("beta grid and z modes must be nonempty");
                }
                if self.n < 8 {
                    return bad("n must be at least 8");
                }
            }
            Suite::Calibration => {
                if self.csv.is_none() {
                    return bad("calibration needs a CSV file");
                }
                if !(self.subsample > 0.0 && self.subsample <= 1.0) {
                    return bad("subsample fraction must lie in (0, 1]");
                }
            }
            Suite::SingleTest => {
                if self.csv.is_none() && self.n < 8 {
                    return bad("n must be at least 8");
                }
            }
        }
        Ok(())
    }
}
