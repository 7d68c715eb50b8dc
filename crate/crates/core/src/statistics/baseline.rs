//! Scalar doubly robust (AIPW) mean-difference baseline.
//!
//! With linear ridge outcome regressions on `[x, 1]` this equals the DR-DATE
//! statistic under a linear outcome kernel and a linear-kernel CME on the
//! same augmented covariates.

use crate::data::{Arm, Dataset, PointSet};
use crate::error::{Error, Result};
use crate::propensity::{design_matrix, PropensityModel};
use crate::Vector;

/// Ridge regression on `[x, 1]`; the penalty covers the intercept too.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRidge {
    /// Length `d + 1`, intercept last.
    pub coefficients: Vec<f64>,
    pub ridge: f64,
}

impl LinearRidge {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let d = self.coefficients.len() - 1;
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        Ok(x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>() + self.coefficients[d])
    }

    pub fn predict_all(&self, points: &PointSet) -> Result<Vec<f64>> {
        points.iter().map(|p| self.predict(p)).collect()
    }
}

/// Solves `(X^T X + ridge I) b = X^T y` on the augmented design.
pub fn fit_outcome_regression(x: &PointSet, y: &[f64], ridge: f64) -> Result<LinearRidge> {
    if x.len() != y.len() {
        return Err(Error::invalid("outcome length differs from covariate rows"));
    }
    if x.is_empty() {
        return Err(Error::invalid("outcome regression needs at least one sample"));
    }
    let design = design_matrix(x);
    let mut gram = design.transpose() * &design;
    for j in 0..gram.nrows() {
        gram[(j, j)] += ridge;
    }
    let rhs = design.transpose() * Vector::from_column_slice(y);
    let chol = gram.cholesky().ok_or(Error::Factorization {
        context: "outcome regression",
        lambda: ridge,
    })?;
    Ok(LinearRidge {
        coefficients: chol.solve(&rhs).iter().copied().collect(),
        ridge,
    })
}

/// AIPW estimate of `E[Y(1)] - E[Y(0)]` from per-sample predictions.
pub fn aipw_from_predictions(labels: &[Arm], e_treated: &[f64], y: &[f64], mu0: &[f64], mu1: &[f64]) -> f64 {
    let m = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let e = e_treated[i];
            match t {
                Arm::Treated => (y[i] - mu1[i]) / e + mu1[i] - mu0[i],
                Arm::Control => mu1[i] - (y[i] - mu0[i]) / (1.0 - e) - mu0[i],
            }
        })
        .sum::<f64>()
        / m
}

/// `|AIPW|` on the test set with models fitted on the train set.
pub fn dr_mean_baseline(
    test: &Dataset,
    prop: &PropensityModel,
    regressions: &[LinearRidge; 2],
) -> Result<f64> {
    if test.y.dim() != 1 {
        return Err(Error::invalid("the mean baseline needs a scalar outcome"));
    }
    let e = prop.predict_treated(&test.x)?;
    let mu0 = regressions[0].predict_all(&test.x)?;
    let mu1 = regressions[1].predict_all(&test.x)?;
    Ok(aipw_from_predictions(&test.t, &e, &test.y.column(0), &mu0, &mu1).abs())
}

/// Fits the per-arm regressions used by [`dr_mean_baseline`].
pub fn fit_arm_regressions(train: &Dataset, ridge: f64) -> Result<[LinearRidge; 2]> {
    let fit = |arm: Arm| {
        let idx = train.arm_indices(arm);
        let y: Vec<f64> = idx.iter().map(|&i| train.y.point(i)[0]).collect();
        fit_outcome_regression(&train.x.select(&idx), &y, ridge)
    };
    Ok([fit(Arm::Control)?, fit(Arm::Treated)?])
}
