//! Mean-embedding estimates as coefficient vectors over outcome points.

use std::collections::BTreeMap;

use crate::cme::CmeModel;
use crate::data::{arm_indices, Arm, Dataset, PointSet};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::propensity::PropensityModel;

use super::{arm_propensity, DettArms, DettNormalization, DettPlugIn, StatisticKind, StatisticValue};

/// Which dataset an atom's outcome comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub source: Source,
    pub index: usize,
    pub coefficient: f64,
}

/// `sum_k coefficient_k * l(y_{source_k, index_k}, .)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedEmbedding {
    pub atoms: Vec<Atom>,
}

/// Outcome points that atoms refer to.
#[derive(Debug, Clone, Copy)]
pub struct OutcomeBank<'a> {
    pub train: &'a PointSet,
    pub test: &'a PointSet,
}

impl<'a> OutcomeBank<'a> {
    pub fn new(train: &'a PointSet, test: &'a PointSet) -> Self {
        Self { train, test }
    }

    fn point(&self, source: Source, index: usize) -> Option<&'a [f64]> {
        let set = match source {
            Source::Train => self.train,
            Source::Test => self.test,
        };
        (index < set.len()).then(|| set.point(index))
    }
}

impl WeightedEmbedding {
    pub fn push(&mut self, source: Source, index: usize, coefficient: f64) {
        if coefficient != 0.0 {
            self.atoms.push(Atom {
                source,
                index,
                coefficient,
            });
        }
    }

    /// Coefficients merged per referenced outcome.
    pub fn coefficients(&self) -> BTreeMap<(Source, usize), f64> {
        let mut map = BTreeMap::new();
        for a in &self.atoms {
            *map.entry((a.source, a.index)).or_insert(0.0) += a.coefficient;
        }
        map
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.coefficient).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().all(|a| a.coefficient == 0.0)
    }

    /// `self - other`.
    pub fn minus(&self, other: &WeightedEmbedding) -> WeightedEmbedding {
        let mut atoms = self.atoms.clone();
        atoms.extend(other.atoms.iter().map(|a| Atom {
            coefficient: -a.coefficient,
            ..*a
        }));
        WeightedEmbedding { atoms }
    }

    /// Squared RKHS norm under `kernel`.
    pub fn norm_squared(&self, kernel: &KernelSpec, bank: &OutcomeBank<'_>) -> Result<f64> {
        let (raw, _) = quadratic_form(&self.coefficients(), kernel, bank)?;
        Ok(raw)
    }
}

/// `c^T L c` over the merged coefficients, plus a magnitude scale.
fn quadratic_form(
    coefs: &BTreeMap<(Source, usize), f64>,
    kernel: &KernelSpec,
    bank: &OutcomeBank<'_>,
) -> Result<(f64, f64)> {
    let mut pts = Vec::with_capacity(coefs.len());
    let mut c = Vec::with_capacity(coefs.len());
    for (&(source, index), &coef) in coefs {
        let p = bank.point(source, index).ok_or_else(|| {
            Error::invalid(format!("atom refers to missing {source:?} outcome {index}"))
        })?;
        pts.push(p);
        c.push(coef);
    }
    let mut total = 0.0;
    let mut max_diag: f64 = 0.0;
    for i in 0..pts.len() {
        let kii = kernel.eval_unchecked(pts[i], pts[i]);
        max_diag = max_diag.max(kii.abs());
        let mut row = 0.5 * c[i] * kii;
        for j in 0..i {
            row += c[j] * kernel.eval_unchecked(pts[i], pts[j]);
        }
        total += 2.0 * c[i] * row;
    }
    let mass: f64 = c.iter().map(|v| v.abs()).sum();
    Ok((total, mass * mass * max_diag))
}

/// MMD between two embeddings.
pub fn mmd_between(
    a: &WeightedEmbedding,
    b: &WeightedEmbedding,
    outcome_kernel: &KernelSpec,
    bank: &OutcomeBank<'_>,
) -> Result<StatisticValue> {
    let (raw, scale) = quadratic_form(&a.minus(b).coefficients(), outcome_kernel, bank)?;
    Ok(StatisticValue::from_squared(StatisticKind::Mmd, raw, scale))
}

fn treated_scores(test: &Dataset, prop: &PropensityModel) -> Result<Vec<f64>> {
    prop.predict_treated(&test.x)
}

/// Inverse-probability-weighted embedding of `Y(t)` over the test set.
pub fn ipw_embedding(test: &Dataset, prop: &PropensityModel, t: Arm) -> Result<WeightedEmbedding> {
    if test.n() == 0 {
        return Err(Error::invalid("empty test set"));
    }
    Ok(ipw_embedding_from_scores(&test.t, &treated_scores(test, prop)?, t))
}

/// [`ipw_embedding`] with externally supplied `e(x_i, 1)`.
pub fn ipw_embedding_from_scores(labels: &[Arm], e_treated: &[f64], t: Arm) -> WeightedEmbedding {
    let m = labels.len() as f64;
    let mut emb = WeightedEmbedding::default();
    for (i, (&ti, &e1)) in labels.iter().zip(e_treated).enumerate() {
        if ti == t {
            emb.push(Source::Test, i, 1.0 / (m * arm_propensity(e1, t)));
        }
    }
    emb
}

fn check_cme_arm(cme: &CmeModel, t: Arm) -> Result<()> {
    if cme.arm != t {
        return Err(Error::invalid(format!(
            "conditional mean embedding is for arm {:?}, statistic needs {t:?}",
            cme.arm
        )));
    }
    Ok(())
}

/// Doubly robust embedding of `Y(t)`:
/// `(1/m) sum_i [1{t_i = t} (l(y_i, .) - r(x_i, t)) / e(x_i, t) + r(x_i, t)]`.
pub fn dr_embedding(
    test: &Dataset,
    prop: &PropensityModel,
    cme_t: &CmeModel,
    t: Arm,
) -> Result<WeightedEmbedding> {
    dr_embedding_from_scores(&test.t, &treated_scores(test, prop)?, &test.x, cme_t, t)
}

pub fn dr_embedding_from_scores(
    labels: &[Arm],
    e_treated: &[f64],
    test_x: &PointSet,
    cme_t: &CmeModel,
    t: Arm,
) -> Result<WeightedEmbedding> {
    check_cme_arm(cme_t, t)?;
    let m = labels.len() as f64;
    let mut emb = WeightedEmbedding::default();
    let mut train_coef = vec![0.0; cme_t.n_train()];
    for (i, (&ti, &e1)) in labels.iter().zip(e_treated).enumerate() {
        let e = arm_propensity(e1, t);
        let ind = if ti == t { 1.0 } else { 0.0 };
        if ind != 0.0 {
            emb.push(Source::Test, i, ind / (m * e));
        }
        let scale = (1.0 - ind / e) / m;
        if scale != 0.0 && !cme_t.is_zero() {
            let v = cme_t.weights(test_x.point(i))?;
            for (acc, vj) in train_coef.iter_mut().zip(v.iter()) {
                *acc += scale * vj;
            }
        }
    }
    for (j, c) in train_coef.into_iter().enumerate() {
        emb.push(Source::Train, cme_t.train_indices[j], c);
    }
    Ok(emb)
}

/// Empirical embedding of the observed outcomes of `arm` in the test set.
pub fn empirical_arm_embedding(labels: &[Arm], arm: Arm) -> Result<WeightedEmbedding> {
    let idx = arm_indices(labels, arm);
    if idx.is_empty() {
        return Err(Error::InsufficientArm {
            arm,
            found: 0,
            required: 1,
        });
    }
    let w = 1.0 / idx.len() as f64;
    let mut emb = WeightedEmbedding::default();
    for i in idx {
        emb.push(Source::Test, i, w);
    }
    Ok(emb)
}

/// CME plug-in embedding of `Y(t) | T = t'`: the average of the arm-`t`
/// conditional embedding over test samples with `T = t'`.
pub fn dett_embedding_cme(test: &Dataset, cme_t: &CmeModel, t: Arm, t_prime: Arm) -> Result<WeightedEmbedding> {
    check_arms(t, t_prime)?;
    check_cme_arm(cme_t, t)?;
    let idx = arm_indices(&test.t, t_prime);
    if idx.is_empty() {
        return Err(Error::InsufficientArm {
            arm: t_prime,
            found: 0,
            required: 1,
        });
    }
    let mut acc = vec![0.0; cme_t.n_train()];
    if !cme_t.is_zero() {
        for &i in &idx {
            let v = cme_t.weights(test.x.point(i))?;
            for (a, vj) in acc.iter_mut().zip(v.iter()) {
                *a += vj;
            }
        }
    }
    let inv = 1.0 / idx.len() as f64;
    let mut emb = WeightedEmbedding::default();
    for (j, a) in acc.into_iter().enumerate() {
        emb.push(Source::Train, cme_t.train_indices[j], a * inv);
    }
    Ok(emb)
}

fn check_arms(t: Arm, t_prime: Arm) -> Result<()> {
    if t == t_prime {
        return Err(Error::invalid("DETT needs distinct target and population arms"));
    }
    Ok(())
}

/// Weighting estimate of `Y(t) | T = t'`: arm-`t` outcomes weighted by the
/// inverse propensity odds `w(x, t)`.
pub fn dett_embedding_weighted(
    test: &Dataset,
    prop: &PropensityModel,
    t: Arm,
    t_prime: Arm,
    normalize: DettNormalization,
) -> Result<WeightedEmbedding> {
    dett_embedding_weighted_from_scores(&test.t, &treated_scores(test, prop)?, t, t_prime, normalize)
}

pub fn dett_embedding_weighted_from_scores(
    labels: &[Arm],
    e_treated: &[f64],
    t: Arm,
    t_prime: Arm,
    normalize: DettNormalization,
) -> Result<WeightedEmbedding> {
    check_arms(t, t_prime)?;
    let weights: Vec<(usize, f64)> = labels
        .iter()
        .zip(e_treated)
        .enumerate()
        .filter(|(_, (&ti, _))| ti == t)
        .map(|(i, (_, &e1))| {
            let e = arm_propensity(e1, t);
            (i, (1.0 - e) / e)
        })
        .collect();
    let z = match normalize {
        DettNormalization::Count => arm_indices(labels, t_prime).len() as f64,
        DettNormalization::SelfNormalized => weights.iter().map(|(_, w)| w).sum(),
    };
    if z == 0.0 {
        return Err(Error::ZeroNormalizer("weighted DETT embedding"));
    }
    let mut emb = WeightedEmbedding::default();
    for (i, w) in weights {
        emb.push(Source::Test, i, w / z);
    }
    Ok(emb)
}

/// Doubly robust embedding of `Y(t) | T = t'`:
/// `(1/n_t') sum_i [1{t_i = t} w(x_i, t) (l(y_i, .) - r(x_i, t)) + 1{t_i = t'} r(x_i, t)]`.
pub fn dr_ett_embedding(
    test: &Dataset,
    prop: &PropensityModel,
    cme_t: &CmeModel,
    t: Arm,
    t_prime: Arm,
) -> Result<WeightedEmbedding> {
    dr_ett_embedding_from_scores(&test.t, &treated_scores(test, prop)?, &test.x, cme_t, t, t_prime)
}

pub fn dr_ett_embedding_from_scores(
    labels: &[Arm],
    e_treated: &[f64],
    test_x: &PointSet,
    cme_t: &CmeModel,
    t: Arm,
    t_prime: Arm,
) -> Result<WeightedEmbedding> {
    check_arms(t, t_prime)?;
    check_cme_arm(cme_t, t)?;
    let n_pop = arm_indices(labels, t_prime).len();
    if n_pop == 0 {
        return Err(Error::InsufficientArm {
            arm: t_prime,
            found: 0,
            required: 1,
        });
    }
    let inv = 1.0 / n_pop as f64;
    let mut emb = WeightedEmbedding::default();
    let mut train_coef = vec![0.0; cme_t.n_train()];
    for (i, (&ti, &e1)) in labels.iter().zip(e_treated).enumerate() {
        // Coefficient of r(x_i, t): -w for arm t, +1 for arm t'.
        let r_scale = if ti == t {
            let e = arm_propensity(e1, t);
            let w = (1.0 - e) / e;
            emb.push(Source::Test, i, w * inv);
            -w * inv
        } else {
            inv
        };
        if !cme_t.is_zero() {
            let v = cme_t.weights(test_x.point(i))?;
            for (acc, vj) in train_coef.iter_mut().zip(v.iter()) {
                *acc += r_scale * vj;
            }
        }
    }
    for (j, c) in train_coef.into_iter().enumerate() {
        emb.push(Source::Train, cme_t.train_indices[j], c);
    }
    Ok(emb)
}

/// Plug-in DATE: MMD between the IPW embeddings of `Y(1)` and `Y(0)`.
pub fn plug_in_date_statistic(
    test: &Dataset,
    prop: &PropensityModel,
    outcome_kernel: &KernelSpec,
) -> Result<StatisticValue> {
    let e1 = treated_scores(test, prop)?;
    let a = ipw_embedding_from_scores(&test.t, &e1, Arm::Treated);
    let b = ipw_embedding_from_scores(&test.t, &e1, Arm::Control);
    let empty = PointSet::new(test.y.dim(), vec![])?;
    let v = mmd_between(&a, &b, outcome_kernel, &OutcomeBank::new(&empty, &test.y))?;
    Ok(StatisticValue { kind: StatisticKind::Date, ..v })
}

/// Plug-in DETT: MMD between an estimate of `Y(t) | T = t'` and the observed
/// arm-`t'` outcomes.
pub fn plug_in_dett_statistic(
    test: &Dataset,
    train_outcomes: &PointSet,
    prop: &PropensityModel,
    cme_t: Option<&CmeModel>,
    arms: DettArms,
    plug_in: DettPlugIn,
    outcome_kernel: &KernelSpec,
) -> Result<StatisticValue> {
    let counterfactual = match plug_in {
        DettPlugIn::Weighted(norm) => {
            dett_embedding_weighted(test, prop, arms.target, arms.population, norm)?
        }
        DettPlugIn::Cme => {
            let cme = cme_t.ok_or_else(|| Error::invalid("CME plug-in DETT needs a fitted CME"))?;
            dett_embedding_cme(test, cme, arms.target, arms.population)?
        }
    };
    let observed = empirical_arm_embedding(&test.t, arms.population)?;
    let v = mmd_between(
        &counterfactual,
        &observed,
        outcome_kernel,
        &OutcomeBank::new(train_outcomes, &test.y),
    )?;
    Ok(StatisticValue { kind: StatisticKind::Dett, ..v })
}
