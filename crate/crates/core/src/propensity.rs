//! Propensity score model: ridge-stabilised logistic regression fitted by
//! iteratively reweighted least squares, with symmetric clipping of the
//! predicted probabilities.

use serde::{Deserialize, Serialize};

use crate::data::{Arm, PointSet, Standardizer};
use crate::error::{Error, Result};
use crate::{Matrix, Vector};

pub const DEFAULT_CLIP_DELTA: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the penalised gradient.
    pub tol: f64,
    /// Ridge penalty on the slopes; `None` means `1e-6 * n`.
    pub ridge: Option<f64>,
    /// Standardise covariates with the fitting sample's statistics.
    pub standardize: bool,
    pub clip_delta: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            ridge: None,
            standardize: true,
            clip_delta: DEFAULT_CLIP_DELTA,
        }
    }
}

/// Fitted logistic propensity model.
///
/// `coefficients` has length `d + 1`; the last entry is the intercept. They
/// act on standardised covariates when `standardizer` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub coefficients: Vec<f64>,
    pub clip_delta: f64,
    pub standardizer: Option<Standardizer>,
    pub converged: bool,
    pub iterations: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl PropensityModel {
    /// Model with given coefficients acting on raw covariates.
    pub fn from_coefficients(coefficients: Vec<f64>, clip_delta: f64) -> Result<Self> {
        check_clip(clip_delta)?;
        if coefficients.is_empty() {
            return Err(Error::invalid("coefficients must include an intercept"));
        }
        Ok(Self {
            coefficients,
            clip_delta,
            standardizer: None,
            converged: true,
            iterations: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// Linear predictor `logit e(x, 1)` before clipping.
    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let d = self.dim();
        let intercept = self.coefficients[d];
        let z = match &self.standardizer {
            Some(s) => x
                .iter()
                .zip(&s.mean)
                .zip(&s.scale)
                .zip(&self.coefficients[..d])
                .map(|(((v, m), sc), c)| c * (v - m) / sc)
                .sum::<f64>(),
            None => x
                .iter()
                .zip(&self.coefficients[..d])
                .map(|(v, c)| c * v)
                .sum::<f64>(),
        };
        Ok(z + intercept)
    }

    /// Unclipped `e(x, 1)`.
    pub fn raw_e(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.linear_predictor(x)?))
    }

    /// Clipped `e(x, t)`.
    pub fn predict_e(&self, x: &[f64], t: Arm) -> Result<f64> {
        let e1 = self
            .raw_e(x)?
            .clamp(self.clip_delta, 1.0 - self.clip_delta);
        Ok(match t {
            Arm::Treated => e1,
            Arm::Control => 1.0 - e1,
        })
    }

    /// Inverse propensity odds `w(x, t) = (1 - e(x, t)) / e(x, t)`.
    pub fn inverse_odds(&self, x: &[f64], t: Arm) -> Result<f64> {
        let e = self.predict_e(x, t)?;
        Ok((1.0 - e) / e)
    }

    /// Clipped `e(x, 1)` for every point.
    pub fn predict_treated(&self, points: &PointSet) -> Result<Vec<f64>> {
        points.iter().map(|p| self.predict_e(p, Arm::Treated)).collect()
    }

    /// Unclipped linear predictors for every point.
    pub fn linear_predictors(&self, points: &PointSet) -> Result<Vec<f64>> {
        points.iter().map(|p| self.linear_predictor(p)).collect()
    }
}

fn check_clip(clip_delta: f64) -> Result<()> {
    if !(clip_delta > 0.0 && clip_delta < 0.5) {
        return Err(Error::invalid(format!(
            "clip_delta must lie in (0, 0.5), got {clip_delta}"
        )));
    }
    Ok(())
}

/// Penalised Bernoulli log-likelihood of `beta` on the design `[x, 1]`.
pub fn penalized_log_likelihood(design: &Matrix, t: &[f64], beta: &Vector, ridge: f64) -> f64 {
    let z = design * beta;
    let ll: f64 = z
        .iter()
        .zip(t)
        .map(|(&zi, &ti)| ti * zi - softplus(zi))
        .sum();
    let d = beta.len() - 1;
    ll - 0.5 * ridge * beta.rows(0, d).norm_squared()
}

fn penalized_gradient(design: &Matrix, t: &[f64], beta: &Vector, ridge: f64) -> Vector {
    let z = design * beta;
    let resid = Vector::from_iterator(t.len(), t.iter().zip(z.iter()).map(|(ti, &zi)| ti - sigmoid(zi)));
    let mut grad = design.transpose() * resid;
    for j in 0..beta.len() - 1 {
        grad[j] -= ridge * beta[j];
    }
    grad
}

/// Design matrix `[x, 1]` (row per sample).
pub fn design_matrix(x: &PointSet) -> Matrix {
    let n = x.len();
    let d = x.dim();
    Matrix::from_fn(n, d + 1, |i, j| if j < d { x.point(i)[j] } else { 1.0 })
}

/// Fits `P(T = 1 | X)` by IRLS with step halving.
///
/// Non-convergence within `max_iter` is not an error: the best iterate is
/// returned with `converged = false`.
pub fn fit_logistic(x: &PointSet, t: &[Arm], config: &LogisticConfig) -> Result<PropensityModel> {
    check_clip(config.clip_delta)?;
    let n = t.len();
    if x.len() != n {
        return Err(Error::invalid(format!(
            "{} covariate rows for {n} treatments",
            x.len()
        )));
    }
    let treated = t.iter().filter(|&&a| a == Arm::Treated).count();
    if treated == 0 {
        return Err(Error::SingleArm(Arm::Control));
    }
    if treated == n {
        return Err(Error::SingleArm(Arm::Treated));
    }
    if !x.all_finite() {
        return Err(Error::invalid("non-finite covariate"));
    }

    let standardizer = (config.standardize && x.dim() > 0).then(|| Standardizer::fit(x));
    let design = match &standardizer {
        Some(s) => design_matrix(&s.transform(x)),
        None => design_matrix(x),
    };
    let tv: Vec<f64> = t.iter().map(|a| a.as_f64()).collect();
    let ridge = config.ridge.unwrap_or(1e-6 * n as f64);
    let p = design.ncols();
    let d = p - 1;

    let mut beta = Vector::zeros(p);
    // Start the intercept at the marginal log-odds.
    let rate = treated as f64 / n as f64;
    beta[d] = (rate / (1.0 - rate)).ln();
    let mut obj = penalized_log_likelihood(&design, &tv, &beta, ridge);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..config.max_iter {
        iterations = iter + 1;
        let mu: Vec<f64> = (&design * &beta).iter().map(|&zi| sigmoid(zi)).collect();
        let grad = penalized_gradient(&design, &tv, &beta, ridge);
        if grad.amax() < config.tol {
            converged = true;
            break;
        }
        let mut weighted = design.clone();
        for (i, m) in mu.iter().enumerate() {
            let w = (m * (1.0 - m)).max(1e-12);
            weighted.row_mut(i).scale_mut(w);
        }
        let mut hess = design.transpose() * weighted;
        for j in 0..d {
            hess[(j, j)] += ridge;
        }
        // Tiny jitter keeps the intercept block invertible when all weights vanish.
        for j in 0..p {
            hess[(j, j)] += 1e-12;
        }
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        // Full Newton steps are taken while they do not lose ground; near the
        // optimum the objective is flat at machine precision and the gradient
        // decides.
        if step.amax() <= 1e-15 * (1.0 + beta.amax()) {
            converged = grad.amax() < config.tol.max(1e-6);
            break;
        }
        let full = &beta + &step;
        let full_obj = penalized_log_likelihood(&design, &tv, &full, ridge);
        let flat = full_obj >= obj - 1e-13 * (1.0 + obj.abs());
        if full_obj >= obj || (flat && penalized_gradient(&design, &tv, &full, ridge).amax() < grad.amax()) {
            beta = full;
            obj = full_obj;
            continue;
        }
        let mut scale = 0.5;
        let mut improved = false;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let cand_obj = penalized_log_likelihood(&design, &tv, &cand, ridge);
            if cand_obj > obj {
                beta = cand;
                obj = cand_obj;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            converged = grad.amax() < config.tol.max(1e-6);
            break;
        }
    }

    Ok(PropensityModel {
        coefficients: beta.iter().copied().collect(),
        clip_delta: config.clip_delta,
        standardizer,
        converged,
        iterations,
    })
}
