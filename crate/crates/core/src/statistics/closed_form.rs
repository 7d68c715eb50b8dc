//! Closed-form squared statistics as quadratic forms over precomputed Gram
//! blocks.
//!
//! For a fitted model bundle the test-set embedding difference of every
//! statistic is `sum_i u_i l(y_i, .) - sum_t sum_j v^t_j l(y^t_j, .)`, where
//! `u` depends on the test treatment labels only through the weights
//! `alpha`/`beta` and `v^t = A_t g^t` with `A_t = W_t K(X^tr_t, X^te)` fixed
//! per bundle. The squared RKHS norm then needs only matrix-vector products
//! with the outcome blocks `L(Y^te, Y^te)`, `L(Y^tr_t, Y^te)` and
//! `L(Y^tr_t, Y^tr_s)`.

use crate::cme::{CmeModel, Regularizer};
use crate::data::{arm_indices, Arm, Dataset, PointSet, Standardizer};
use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};
use crate::propensity::{fit_logistic, LogisticConfig, PropensityModel};
use crate::{Matrix, Vector};

use super::baseline::{aipw_from_predictions, fit_outcome_regression};
use super::{
    alpha_weights, arm_propensity, beta_weights, DettArms, DettNormalization, DettPlugIn,
    StatisticKind, StatisticValue,
};

/// Modelling choices shared by every fitted bundle of one test.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub logistic: LogisticConfig,
    pub lambda: Regularizer,
    pub dett_arms: DettArms,
    pub dett_plug_in: DettPlugIn,
    /// Ridge penalty of the linear outcome regressions of the mean baseline.
    pub baseline_ridge: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            logistic: LogisticConfig::default(),
            lambda: Regularizer::Default,
            dett_arms: DettArms::default(),
            dett_plug_in: DettPlugIn::default(),
            baseline_ridge: 1e-3,
        }
    }
}

/// Per-arm blocks of a fitted bundle.
#[derive(Debug, Clone)]
pub struct ArmBlocks {
    pub train_indices: Vec<usize>,
    /// `W_t K(X^tr_t, X^te)`, `n_t x m`.
    pub a: Matrix,
    /// `L(Y^tr_t, Y^te)`.
    pub l_arm_test: Matrix,
    /// `L(Y^tr_t, Y^tr_t)`.
    pub l_arm: Matrix,
}

impl ArmBlocks {
    fn from_cme(cme: &CmeModel, k_arm_test: &Matrix, l_arm_test: Matrix, l_arm: Matrix) -> Self {
        Self {
            train_indices: cme.train_indices.clone(),
            a: cme.weights_from_kernel(k_arm_test),
            l_arm_test,
            l_arm,
        }
    }
}

/// Everything fitted on one train labelling.
#[derive(Debug, Clone)]
pub struct FittedBundle {
    pub propensity: PropensityModel,
    /// Clipped `e(x_i, 1)` on the test set.
    pub e_test: Vec<f64>,
    pub arms: [Option<ArmBlocks>; 2],
    /// `L(Y^tr_0, Y^tr_1)`.
    pub l_cross: Option<Matrix>,
    /// Linear outcome-regression predictions on the test set, per arm.
    pub baseline_predictions: Option<[Vec<f64>; 2]>,
}

impl FittedBundle {
    fn arm(&self, arm: Arm) -> Result<&ArmBlocks> {
        self.arms[arm.index()]
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("no conditional mean embedding fitted for {arm:?}")))
    }
}

/// Label-independent quantities of one train/test split.
#[derive(Debug, Clone)]
pub struct StatisticContext {
    pub train_x: PointSet,
    pub train_y: PointSet,
    pub test_x: PointSet,
    pub test_y: PointSet,
    pub standardizer: Standardizer,
    pub covariate_kernel: KernelSpec,
    pub outcome_kernel: KernelSpec,
    pub config: ModelConfig,
    kinds: Vec<StatisticKind>,
    k_train: Matrix,
    k_train_test: Matrix,
    l_train: Matrix,
    l_train_test: Matrix,
    l_test: Matrix,
    l_diag_max: f64,
}

impl StatisticContext {
    /// Standardises covariates with train-fold statistics, resolves the
    /// kernels (median heuristic on the pooled sample when `None`) and
    /// precomputes the Gram blocks needed by `kinds`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        train_x: &PointSet,
        train_y: &PointSet,
        test_x: &PointSet,
        test_y: &PointSet,
        covariate_kernel: Option<KernelSpec>,
        outcome_kernel: Option<KernelSpec>,
        config: ModelConfig,
        kinds: &[StatisticKind],
    ) -> Result<Self> {
        if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
            return Err(Error::invalid("covariate and outcome row counts differ"));
        }
        if test_x.is_empty() || train_x.is_empty() {
            return Err(Error::invalid("train and test folds must be nonempty"));
        }
        let standardizer = Standardizer::fit(train_x);
        let train_x = standardizer.transform(train_x);
        let test_x = standardizer.transform(test_x);
        let covariate_kernel = match covariate_kernel {
            Some(k) => k,
            None => KernelSpec::gaussian_median(&train_x.concat(&test_x)?)?,
        };
        let outcome_kernel = match outcome_kernel {
            Some(k) => k,
            None => KernelSpec::gaussian_median(&train_y.concat(test_y)?)?,
        };
        if kinds.contains(&StatisticKind::MeanDrBaseline) && train_y.dim() != 1 {
            return Err(Error::invalid("the mean baseline needs a scalar outcome"));
        }
        let needs_train = kinds.iter().any(|&k| uses_cme(k, &config));
        let empty = Matrix::zeros(0, 0);
        let (k_train, k_train_test, l_train, l_train_test) = if needs_train {
            (
                kernels::self_gram(&covariate_kernel, &train_x),
                kernels::cross_gram(&covariate_kernel, &train_x, &test_x),
                kernels::self_gram(&outcome_kernel, train_y),
                kernels::cross_gram(&outcome_kernel, train_y, test_y),
            )
        } else {
            (empty.clone(), empty.clone(), empty.clone(), empty)
        };
        let l_test = kernels::self_gram(&outcome_kernel, test_y);
        let l_diag_max = l_test
            .diagonal()
            .iter()
            .chain(l_train.diagonal().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self {
            train_x,
            train_y: train_y.clone(),
            test_x,
            test_y: test_y.clone(),
            standardizer,
            covariate_kernel,
            outcome_kernel,
            config,
            kinds: kinds.to_vec(),
            k_train,
            k_train_test,
            l_train,
            l_train_test,
            l_test,
            l_diag_max,
        })
    }

    pub fn kinds(&self) -> &[StatisticKind] {
        &self.kinds
    }

    pub fn n_train(&self) -> usize {
        self.train_x.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_x.len()
    }

    /// Combined fingerprint of both kernels.
    pub fn kernel_fingerprint(&self) -> u64 {
        self.covariate_kernel.fingerprint() ^ self.outcome_kernel.fingerprint().rotate_left(1)
    }

    /// Fits the propensity model and whatever outcome models the requested
    /// statistics need, on the train fold with `train_labels`.
    pub fn fit(&self, train_labels: &[Arm]) -> Result<FittedBundle> {
        if train_labels.len() != self.n_train() {
            return Err(Error::DimensionMismatch {
                expected: self.n_train(),
                found: train_labels.len(),
            });
        }
        let propensity = fit_logistic(&self.train_x, train_labels, &self.config.logistic)?;
        let e_test = propensity.predict_treated(&self.test_x)?;

        let mut arms: [Option<ArmBlocks>; 2] = [None, None];
        let needed = |arm: Arm| {
            self.kinds.iter().any(|&k| match k {
                StatisticKind::DrDate => true,
                StatisticKind::DrDett => arm == self.config.dett_arms.target,
                StatisticKind::Dett => {
                    self.config.dett_plug_in == DettPlugIn::Cme && arm == self.config.dett_arms.target
                }
                _ => false,
            })
        };
        for arm in Arm::BOTH {
            if !needed(arm) {
                continue;
            }
            let idx = arm_indices(train_labels, arm);
            if idx.len() < 2 {
                return Err(Error::InsufficientArm {
                    arm,
                    found: idx.len(),
                    required: 2,
                });
            }
            let k_arm = self.k_train.select_rows(&idx).select_columns(&idx);
            let cme = CmeModel::from_gram(
                arm,
                idx.clone(),
                self.train_x.select(&idx),
                &k_arm,
                self.covariate_kernel,
                self.config.lambda,
            )?;
            let k_arm_test = self.k_train_test.select_rows(&idx);
            let l_arm_test = self.l_train_test.select_rows(&idx);
            let l_arm = self.l_train.select_rows(&idx).select_columns(&idx);
            arms[arm.index()] = Some(ArmBlocks::from_cme(&cme, &k_arm_test, l_arm_test, l_arm));
        }
        let l_cross = match (&arms[0], &arms[1]) {
            (Some(a0), Some(a1)) if self.kinds.contains(&StatisticKind::DrDate) => Some(
                self.l_train
                    .select_rows(&a0.train_indices)
                    .select_columns(&a1.train_indices),
            ),
            _ => None,
        };

        let baseline_predictions = if self.kinds.contains(&StatisticKind::MeanDrBaseline) {
            let mut preds: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            for arm in Arm::BOTH {
                let idx = arm_indices(train_labels, arm);
                let y: Vec<f64> = idx.iter().map(|&i| self.train_y.point(i)[0]).collect();
                let reg = fit_outcome_regression(&self.train_x.select(&idx), &y, self.config.baseline_ridge)?;
                preds[arm.index()] = reg.predict_all(&self.test_x)?;
            }
            Some(preds)
        } else {
            None
        };

        Ok(FittedBundle {
            propensity,
            e_test,
            arms,
            l_cross,
            baseline_predictions,
        })
    }

    /// Evaluates `kind` on the test set under `test_labels`.
    pub fn evaluate(&self, bundle: &FittedBundle, kind: StatisticKind, test_labels: &[Arm]) -> Result<StatisticValue> {
        if test_labels.len() != self.n_test() {
            return Err(Error::DimensionMismatch {
                expected: self.n_test(),
                found: test_labels.len(),
            });
        }
        let e = &bundle.e_test;
        let arms = self.config.dett_arms;
        let (raw, mass) = match kind {
            StatisticKind::Date => date_quadratic(&self.l_test, e, test_labels),
            StatisticKind::DrDate => {
                let l_cross = bundle
                    .l_cross
                    .as_ref()
                    .ok_or_else(|| Error::invalid("DR-DATE blocks were not fitted"))?;
                dr_date_quadratic(
                    &self.l_test,
                    e,
                    test_labels,
                    bundle.arm(Arm::Control)?,
                    bundle.arm(Arm::Treated)?,
                    l_cross,
                )
            }
            StatisticKind::Dett => match self.config.dett_plug_in {
                DettPlugIn::Weighted(norm) => dett_weighted_quadratic(&self.l_test, e, test_labels, arms, norm)?,
                DettPlugIn::Cme => dett_cme_quadratic(&self.l_test, test_labels, arms, bundle.arm(arms.target)?)?,
            },
            StatisticKind::DrDett => {
                dr_dett_quadratic(&self.l_test, e, test_labels, arms, bundle.arm(arms.target)?)?
            }
            StatisticKind::MeanDrBaseline => {
                let preds = bundle
                    .baseline_predictions
                    .as_ref()
                    .ok_or_else(|| Error::invalid("baseline regressions were not fitted"))?;
                let y = self.test_y.column(0);
                let v = aipw_from_predictions(test_labels, e, &y, &preds[0], &preds[1]);
                return Ok(StatisticValue::from_abs(kind, v));
            }
            StatisticKind::Mmd => return Err(Error::invalid("MMD is not a test statistic kind")),
        };
        Ok(StatisticValue::from_squared(kind, raw, mass * mass * self.l_diag_max))
    }
}

fn uses_cme(kind: StatisticKind, config: &ModelConfig) -> bool {
    kind.needs_cme() || (kind == StatisticKind::Dett && config.dett_plug_in == DettPlugIn::Cme)
}

fn quad(l: &Matrix, u: &Vector) -> f64 {
    (l * u).dot(u)
}

fn bilinear(l: &Matrix, v: &Vector, u: &Vector) -> f64 {
    (l * u).dot(v)
}

fn l1(v: &Vector) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn date_quadratic(l_test: &Matrix, e: &[f64], labels: &[Arm]) -> (f64, f64) {
    let m = labels.len() as f64;
    let u = Vector::from_vec(alpha_weights(e, labels)) / m;
    (quad(l_test, &u), l1(&u))
}

/// `||(1/m) sum_i alpha_i (l(y_i,.) - (1-e_i) r(x_i,1) - e_i r(x_i,0))||^2`.
fn dr_date_quadratic(
    l_test: &Matrix,
    e: &[f64],
    labels: &[Arm],
    b0: &ArmBlocks,
    b1: &ArmBlocks,
    l_cross: &Matrix,
) -> (f64, f64) {
    let m = labels.len() as f64;
    let u = Vector::from_vec(alpha_weights(e, labels)) / m;
    let g0 = Vector::from_iterator(u.len(), u.iter().zip(e).map(|(ui, ei)| ui * ei));
    let g1 = Vector::from_iterator(u.len(), u.iter().zip(e).map(|(ui, ei)| ui * (1.0 - ei)));
    let v0 = &b0.a * g0;
    let v1 = &b1.a * g1;
    let raw = quad(l_test, &u) + quad(&b0.l_arm, &v0) + quad(&b1.l_arm, &v1)
        - 2.0 * bilinear(&b0.l_arm_test, &v0, &u)
        - 2.0 * bilinear(&b1.l_arm_test, &v1, &u)
        + 2.0 * bilinear(l_cross, &v0, &v1);
    (raw, l1(&u) + l1(&v0) + l1(&v1))
}

fn population_count(labels: &[Arm], arms: DettArms) -> Result<f64> {
    if arms.target == arms.population {
        return Err(Error::invalid("DETT needs distinct target and population arms"));
    }
    let n = labels.iter().filter(|&&t| t == arms.population).count();
    if n == 0 {
        return Err(Error::InsufficientArm {
            arm: arms.population,
            found: 0,
            required: 1,
        });
    }
    Ok(n as f64)
}

fn dett_weighted_quadratic(
    l_test: &Matrix,
    e: &[f64],
    labels: &[Arm],
    arms: DettArms,
    norm: DettNormalization,
) -> Result<(f64, f64)> {
    let n_pop = population_count(labels, arms)?;
    let u = match norm {
        DettNormalization::Count => Vector::from_vec(beta_weights(e, labels, arms.target)) / n_pop,
        DettNormalization::SelfNormalized => {
            let w: Vec<f64> = e
                .iter()
                .zip(labels)
                .map(|(&e1, &t)| {
                    if t == arms.target {
                        let p = arm_propensity(e1, arms.target);
                        (1.0 - p) / p
                    } else {
                        0.0
                    }
                })
                .collect();
            let z: f64 = w.iter().sum();
            if z == 0.0 {
                return Err(Error::ZeroNormalizer("weighted DETT embedding"));
            }
            Vector::from_iterator(
                labels.len(),
                w.iter()
                    .zip(labels)
                    .map(|(wi, &t)| if t == arms.target { wi / z } else { -1.0 / n_pop }),
            )
        }
    };
    Ok((quad(l_test, &u), l1(&u)))
}

fn dett_cme_quadratic(l_test: &Matrix, labels: &[Arm], arms: DettArms, bt: &ArmBlocks) -> Result<(f64, f64)> {
    let n_pop = population_count(labels, arms)?;
    let s = Vector::from_iterator(
        labels.len(),
        labels
            .iter()
            .map(|&t| if t == arms.population { 1.0 / n_pop } else { 0.0 }),
    );
    let v = &bt.a * &s;
    let raw = quad(&bt.l_arm, &v) - 2.0 * bilinear(&bt.l_arm_test, &v, &s) + quad(l_test, &s);
    Ok((raw, l1(&v) + l1(&s)))
}

/// `||(1/n_t') sum_i beta_i (l(y_i,.) - r(x_i,t))||^2`.
fn dr_dett_quadratic(
    l_test: &Matrix,
    e: &[f64],
    labels: &[Arm],
    arms: DettArms,
    bt: &ArmBlocks,
) -> Result<(f64, f64)> {
    let n_pop = population_count(labels, arms)?;
    let u = Vector::from_vec(beta_weights(e, labels, arms.target)) / n_pop;
    let v = &bt.a * &u;
    let raw = quad(l_test, &u) - 2.0 * bilinear(&bt.l_arm_test, &v, &u) + quad(&bt.l_arm, &v);
    Ok((raw, l1(&u) + l1(&v)))
}

fn standalone_blocks(test: &Dataset, train: &Dataset, cme: &CmeModel, outcome_kernel: &KernelSpec) -> Result<ArmBlocks> {
    let train_y = train.y.select(&cme.train_indices);
    let k = kernels::cross_gram(&cme.covariate_kernel, &cme.train_points, &test.x);
    Ok(ArmBlocks::from_cme(
        cme,
        &k,
        kernels::cross_gram(outcome_kernel, &train_y, &test.y),
        kernels::self_gram(outcome_kernel, &train_y),
    ))
}

/// DR-DATE from fitted models via the closed-form quadratic form.
pub fn dr_date_statistic_closed_form(
    test: &Dataset,
    train: &Dataset,
    prop: &PropensityModel,
    cme_0: &CmeModel,
    cme_1: &CmeModel,
    outcome_kernel: &KernelSpec,
) -> Result<StatisticValue> {
    let e = prop.predict_treated(&test.x)?;
    dr_date_closed_form_with_scores(test, train, &e, cme_0, cme_1, outcome_kernel)
}

/// [`dr_date_statistic_closed_form`] with externally supplied `e(x_i, 1)`.
pub fn dr_date_closed_form_with_scores(
    test: &Dataset,
    train: &Dataset,
    e_treated: &[f64],
    cme_0: &CmeModel,
    cme_1: &CmeModel,
    outcome_kernel: &KernelSpec,
) -> Result<StatisticValue> {
    if cme_0.arm != Arm::Control || cme_1.arm != Arm::Treated {
        return Err(Error::invalid("expected (control, treated) conditional mean embeddings"));
    }
    let b0 = standalone_blocks(test, train, cme_0, outcome_kernel)?;
    let b1 = standalone_blocks(test, train, cme_1, outcome_kernel)?;
    let l_cross = kernels::cross_gram(
        outcome_kernel,
        &train.y.select(&cme_0.train_indices),
        &train.y.select(&cme_1.train_indices),
    );
    let l_test = kernels::self_gram(outcome_kernel, &test.y);
    let (raw, mass) = dr_date_quadratic(&l_test, e_treated, &test.t, &b0, &b1, &l_cross);
    Ok(StatisticValue::from_squared(StatisticKind::DrDate, raw, mass * mass))
}

/// DR-DETT from fitted models via the closed-form quadratic form.
pub fn dr_dett_statistic_closed_form(
    test: &Dataset,
    train: &Dataset,
    prop: &PropensityModel,
    cme_t: &CmeModel,
    arms: DettArms,
    outcome_kernel: &KernelSpec,
) -> Result<StatisticValue> {
    let e = prop.predict_treated(&test.x)?;
    dr_dett_closed_form_with_scores(test, train, &e, cme_t, arms, outcome_kernel)
}

pub fn dr_dett_closed_form_with_scores(
    test: &Dataset,
    train: &Dataset,
    e_treated: &[f64],
    cme_t: &CmeModel,
    arms: DettArms,
    outcome_kernel: &KernelSpec,
) -> Result<StatisticValue> {
    if cme_t.arm != arms.target {
        return Err(Error::invalid("CME arm differs from the DETT target arm"));
    }
    let bt = standalone_blocks(test, train, cme_t, outcome_kernel)?;
    let l_test = kernels::self_gram(outcome_kernel, &test.y);
    let (raw, mass) = dr_dett_quadratic(&l_test, e_treated, &test.t, arms, &bt)?;
    Ok(StatisticValue::from_squared(StatisticKind::DrDett, raw, mass * mass))
}
