//! Plug-in and doubly robust counterfactual mean embeddings and the MMD test
//! statistics built from them.
//!
//! Two evaluation routes exist for every statistic:
//!
//! - [`embedding`]: explicit [`WeightedEmbedding`]s (coefficients over concrete
//!   outcome points) compared with [`mmd_between`]. Straightforward and used as
//!   the reference.
//! - [`closed_form`]: the same squared MMD written as a quadratic form in the
//!   treatment-dependent weights (`alpha`, `beta`) with outcome Gram blocks
//!   precomputed per fitted model bundle. This is what the permutation loop
//!   uses.

pub mod baseline;
pub mod closed_form;
pub mod embedding;

use serde::{Deserialize, Serialize};

use crate::data::Arm;

pub use baseline::{dr_mean_baseline, fit_outcome_regression, LinearRidge};
pub use closed_form::{
    dr_date_statistic_closed_form, dr_dett_statistic_closed_form, FittedBundle, ModelConfig,
    StatisticContext,
};
pub use embedding::{
    dett_embedding_cme, dett_embedding_weighted, dr_embedding, dr_ett_embedding,
    empirical_arm_embedding, ipw_embedding, mmd_between, plug_in_date_statistic,
    plug_in_dett_statistic, Atom, OutcomeBank, Source, WeightedEmbedding,
};

/// Which test statistic a value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StatisticKind {
    #[serde(rename = "DATE")]
    Date,
    #[serde(rename = "DR-DATE")]
    DrDate,
    #[serde(rename = "DETT")]
    Dett,
    #[serde(rename = "DR-DETT")]
    DrDett,
    #[serde(rename = "MEAN-DR-BASELINE")]
    MeanDrBaseline,
    /// A plain MMD between two embeddings.
    #[serde(rename = "MMD")]
    Mmd,
}

impl StatisticKind {
    pub const KERNEL_STATISTICS: [StatisticKind; 4] = [
        StatisticKind::Date,
        StatisticKind::DrDate,
        StatisticKind::Dett,
        StatisticKind::DrDett,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StatisticKind::Date => "DATE",
            StatisticKind::DrDate => "DR-DATE",
            StatisticKind::Dett => "DETT",
            StatisticKind::DrDett => "DR-DETT",
            StatisticKind::MeanDrBaseline => "MEAN-DR-BASELINE",
            StatisticKind::Mmd => "MMD",
        }
    }

    /// Parses CLI spellings such as `dr-date` or `DATE`.
    pub fn parse(s: &str) -> Option<StatisticKind> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "date" => Some(StatisticKind::Date),
            "dr-date" => Some(StatisticKind::DrDate),
            "dett" => Some(StatisticKind::Dett),
            "dr-dett" => Some(StatisticKind::DrDett),
            "baseline" | "mean-dr-baseline" | "dr-mean" => Some(StatisticKind::MeanDrBaseline),
            _ => None,
        }
    }

    pub fn needs_cme(self) -> bool {
        matches!(self, StatisticKind::DrDate | StatisticKind::DrDett)
    }
}

impl std::fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A statistic value. `mmd_squared` is clamped at zero; the unclamped value
/// is kept in `raw_squared`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatisticValue {
    pub kind: StatisticKind,
    pub mmd_squared: f64,
    pub mmd: f64,
    pub raw_squared: f64,
    /// Set when `raw_squared` was below `-1e-8` times the Gram scale.
    pub negative_warning: bool,
}

impl StatisticValue {
    /// Wraps a squared discrepancy; `scale` is the magnitude used for the
    /// negativity warning (e.g. the squared coefficient mass times the
    /// largest Gram entry).
    pub fn from_squared(kind: StatisticKind, raw_squared: f64, scale: f64) -> Self {
        let mmd_squared = raw_squared.max(0.0);
        Self {
            kind,
            mmd_squared,
            mmd: mmd_squared.sqrt(),
            raw_squared,
            negative_warning: raw_squared < -1e-8 * scale.abs().max(f64::MIN_POSITIVE),
        }
    }

    /// Value for an unsigned scalar statistic (the mean baseline).
    pub fn from_abs(kind: StatisticKind, value: f64) -> Self {
        let v = value.abs();
        Self {
            kind,
            mmd_squared: v * v,
            mmd: v,
            raw_squared: v * v,
            negative_warning: false,
        }
    }
}

/// Which arms a DETT-type statistic compares: the counterfactual arm `t`
/// inside the population `T = population`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DettArms {
    pub target: Arm,
    pub population: Arm,
}

impl DettArms {
    /// Effect of treatment on the untreated: `Y(1) | T = 0` against `Y | T = 0`.
    pub const TREATED_ON_CONTROLS: DettArms = DettArms {
        target: Arm::Treated,
        population: Arm::Control,
    };
    pub const CONTROL_ON_TREATED: DettArms = DettArms {
        target: Arm::Control,
        population: Arm::Treated,
    };

    pub fn swapped(self) -> DettArms {
        DettArms {
            target: self.population,
            population: self.target,
        }
    }
}

impl Default for DettArms {
    fn default() -> Self {
        Self::TREATED_ON_CONTROLS
    }
}

/// Normaliser for the weighting-based DETT embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DettNormalization {
    /// Divide by the population-arm count.
    #[default]
    Count,
    /// Divide by the sum of the weights (Hájek).
    #[serde(rename = "self")]
    SelfNormalized,
}

/// How the plug-in DETT statistic estimates the counterfactual embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DettPlugIn {
    Weighted(DettNormalization),
    Cme,
}

impl Default for DettPlugIn {
    fn default() -> Self {
        DettPlugIn::Weighted(DettNormalization::Count)
    }
}

/// Treatment-dependent weights of the doubly robust quadratic forms.
///
/// `alpha_i = (t_i - e_i) / (e_i (1 - e_i))` with `e_i = e(x_i, 1)`, and
/// `beta_i = (1{t_i = t} - e(x_i, t)) / e(x_i, t)` for the DETT target arm `t`
/// (for `t = 1` this is `(t_i - e_i) / e_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct DrWeights {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl DrWeights {
    pub fn new(e_treated: &[f64], labels: &[Arm], target: Arm) -> Self {
        Self {
            alpha: alpha_weights(e_treated, labels),
            beta: beta_weights(e_treated, labels, target),
        }
    }
}

pub fn alpha_weights(e_treated: &[f64], labels: &[Arm]) -> Vec<f64> {
    e_treated
        .iter()
        .zip(labels)
        .map(|(&e, &t)| (t.as_f64() - e) / (e * (1.0 - e)))
        .collect()
}

pub fn beta_weights(e_treated: &[f64], labels: &[Arm], target: Arm) -> Vec<f64> {
    e_treated
        .iter()
        .zip(labels)
        .map(|(&e1, &t)| {
            let e = arm_propensity(e1, target);
            let ind = if t == target { 1.0 } else { 0.0 };
            (ind - e) / e
        })
        .collect()
}

/// `e(x, arm)` from `e(x, 1)`.
#[inline]
pub fn arm_propensity(e_treated: f64, arm: Arm) -> f64 {
    match arm {
        Arm::Treated => e_treated,
        Arm::Control => 1.0 - e_treated,
    }
}
