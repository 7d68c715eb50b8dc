//! RKHS distance between estimated counterfactual embeddings and a large
//! counterfactual oracle sample, over a grid of sample sizes.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::cme::fit_cme;
use crate::data::{Arm, Dataset, PointSet};
use crate::datagen::{oracle_embedding_sample, DgpSpec};
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::par;
use crate::propensity::fit_logistic;
use crate::rng::{derive_seed, stream, substream};
use crate::statistics::embedding::{
    dett_embedding_cme, dett_embedding_weighted, dr_embedding, dr_ett_embedding, ipw_embedding, OutcomeBank,
    Source, WeightedEmbedding,
};
use crate::statistics::DettNormalization;

use super::{ExperimentConfig, ResultRow, Suite};

/// Counterfactual distribution an estimator targets: `Y(arm)`, optionally
/// within `T = population`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub arm: Arm,
    pub population: Option<Arm>,
}

impl Target {
    const ALL: [Target; 4] = [
        Target { arm: Arm::Control, population: None },
        Target { arm: Arm::Treated, population: None },
        Target { arm: Arm::Treated, population: Some(Arm::Control) },
        Target { arm: Arm::Control, population: Some(Arm::Treated) },
    ];

    fn slot(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Method {
    Ipw,
    Dr,
    DettWeighted,
    DettCme,
    DrDett,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Estimator {
    pub name: &'static str,
    pub target: Target,
    method: Method,
}

const fn est(name: &'static str, arm: Arm, population: Option<Arm>, method: Method) -> Estimator {
    Estimator {
        name,
        target: Target { arm, population },
        method,
    }
}

/// Every estimator reported by the convergence suite.
pub const ESTIMATORS: [Estimator; 10] = [
    est("ipw_y0", Arm::Control, None, Method::Ipw),
    est("ipw_y1", Arm::Treated, None, Method::Ipw),
    est("dr_y0", Arm::Control, None, Method::Dr),
    est("dr_y1", Arm::Treated, None, Method::Dr),
    est("dett_weighted_y1_t0", Arm::Treated, Some(Arm::Control), Method::DettWeighted),
    est("dett_cme_y1_t0", Arm::Treated, Some(Arm::Control), Method::DettCme),
    est("dr_dett_y1_t0", Arm::Treated, Some(Arm::Control), Method::DrDett),
    est("dett_weighted_y0_t1", Arm::Control, Some(Arm::Treated), Method::DettWeighted),
    est("dett_cme_y0_t1", Arm::Control, Some(Arm::Treated), Method::DettCme),
    est("dr_dett_y0_t1", Arm::Control, Some(Arm::Treated), Method::DrDett),
];

/// Large counterfactual samples standing in for the true embeddings.
#[derive(Debug, Clone)]
pub struct ConvergenceOracle {
    pub kernel: KernelSpec,
    samples: Vec<PointSet>,
    self_norms: Vec<f64>,
}

impl ConvergenceOracle {
    /// Draws `draws` outcomes per target. The outcome bandwidth is the
    /// median heuristic on the first 1000 draws of every target pooled.
    pub fn build(spec: &DgpSpec, draws: usize) -> Result<Self> {
        let samples = Target::ALL
            .iter()
            .map(|t| {
                let s = DgpSpec {
                    seed: derive_seed(spec.seed, &[stream::ORACLE, t.slot() as u64]),
                    ..spec.clone()
                };
                oracle_embedding_sample(&s, t.arm, t.population, draws)
            })
            .collect::<Result<Vec<_>>>()?;
        let head: Vec<usize> = (0..draws.min(1000)).collect();
        let mut pooled = samples[0].select(&head);
        for s in &samples[1..] {
            pooled = pooled.concat(&s.select(&head))?;
        }
        let kernel = KernelSpec::gaussian_median(&pooled)?;
        let self_norms = samples.iter().map(|s| embedding_norm_squared(&kernel, s)).collect();
        Ok(Self {
            kernel,
            samples,
            self_norms,
        })
    }

    pub fn sample(&self, target: Target) -> &PointSet {
        &self.samples[target.slot()]
    }

    /// The oracle embedding evaluated at each of `points`.
    pub fn embedding_at(&self, target: Target, points: &PointSet) -> Vec<f64> {
        let s = self.sample(target);
        let inv = 1.0 / s.len() as f64;
        par::map_range(points.len(), |i| {
            let y = points.point(i);
            s.iter().map(|o| self.kernel.eval_unchecked(y, o)).sum::<f64>() * inv
        })
    }

    /// `||emb - oracle||` given the oracle embedding at the train and test
    /// outcomes.
    pub fn distance(
        &self,
        emb: &WeightedEmbedding,
        target: Target,
        bank: &OutcomeBank<'_>,
        at_train: &[f64],
        at_test: &[f64],
    ) -> Result<f64> {
        let own = emb.norm_squared(&self.kernel, bank)?;
        let cross: f64 = emb
            .atoms
            .iter()
            .map(|a| {
                a.coefficient
                    * match a.source {
                        Source::Train => at_train[a.index],
                        Source::Test => at_test[a.index],
                    }
            })
            .sum();
        Ok((own - 2.0 * cross + self.self_norms[target.slot()]).max(0.0).sqrt())
    }
}

/// `(1/N^2) sum_ij l(o_i, o_j)`, the squared norm of the empirical
/// embedding of `sample`.
///
/// Scalar samples under a Gaussian kernel use the expansion
/// `exp(-(u - v)^2 / 2) = exp(-u^2 / 2) exp(-v^2 / 2) sum_k (u v)^k / k!`,
/// which turns the double sum into `sum_k S_k^2` with
/// `S_k = (1/N) sum_i exp(-u_i^2 / 2) u_i^k / sqrt(k!)`. Every term is
/// nonnegative, so the truncated series loses no precision. Other cases
/// fall back to the direct double sum.
pub fn embedding_norm_squared(kernel: &KernelSpec, sample: &PointSet) -> f64 {
    let n = sample.len();
    if let (KernelFamily::Gaussian, 1) = (kernel.family(), sample.dim()) {
        let h = kernel.bandwidth();
        let x = sample.as_slice();
        let c = x.iter().sum::<f64>() / n as f64;
        let u: Vec<f64> = x.iter().map(|v| (v - c) / h).collect();
        let max_u2 = u.iter().fold(0.0f64, |m, v| m.max(v * v));
        let terms = (std::f64::consts::E * max_u2).ceil() as usize + 60;
        let mut p: Vec<f64> = u.iter().map(|v| (-0.5 * v * v).exp() / n as f64).collect();
        let mut total = 0.0;
        for k in 0..terms {
            if k > 0 {
                let scale = 1.0 / (k as f64).sqrt();
                for (pi, ui) in p.iter_mut().zip(&u) {
                    *pi *= ui * scale;
                }
            }
            let s: f64 = p.iter().sum();
            total += s * s;
        }
        return total;
    }
    let rows = par::map_range(n, |i| {
        let xi = sample.point(i);
        0.5 * kernel.eval_unchecked(xi, xi) + (0..i).map(|j| kernel.eval_unchecked(xi, sample.point(j))).sum::<f64>()
    });
    2.0 * rows.iter().sum::<f64>() / (n * n) as f64
}

fn random_halves(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, stream::SUBSAMPLE));
    let (a, b) = idx.split_at(n / 2);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Errors of every estimator on one simulated dataset.
pub fn convergence_replicate(
    config: &ExperimentConfig,
    oracle: &ConvergenceOracle,
    data: &Dataset,
    split_seed: u64,
) -> Result<Vec<(Estimator, f64)>> {
    let (tr, te) = random_halves(data.n(), split_seed);
    let train = data.subset(&tr);
    let test = data.subset(&te);
    let prop = fit_logistic(&train.x, &train.t, &config.test.model.logistic)?;
    let kernel = KernelSpec::gaussian_median(&train.x)?;
    let lambda = config.test.model.lambda;
    let cme = [
        fit_cme(&train, Arm::Control, kernel, lambda)?,
        fit_cme(&train, Arm::Treated, kernel, lambda)?,
    ];
    let bank = OutcomeBank::new(&train.y, &test.y);
    let mut at = Vec::new();
    for t in Target::ALL {
        at.push((oracle.embedding_at(t, &train.y), oracle.embedding_at(t, &test.y)));
    }
    ESTIMATORS
        .iter()
        .map(|e| {
            let arm = e.target.arm;
            let pop = e.target.population.unwrap_or(arm.other());
            let emb = match e.method {
                Method::Ipw => ipw_embedding(&test, &prop, arm)?,
                Method::Dr => dr_embedding(&test, &prop, &cme[arm.index()], arm)?,
                Method::DettWeighted => dett_embedding_weighted(&test, &prop, arm, pop, DettNormalization::Count)?,
                Method::DettCme => dett_embedding_cme(&test, &cme[arm.index()], arm, pop)?,
                Method::DrDett => dr_ett_embedding(&test, &prop, &cme[arm.index()], arm, pop)?,
            };
            let (a_tr, a_te) = &at[e.target.slot()];
            Ok((*e, oracle.distance(&emb, e.target, &bank, a_tr, a_te)?))
        })
        .collect()
}

/// One row per grid size, replicate and estimator; the value is the RKHS
/// distance to the oracle embedding.
pub fn run_fit_convergence(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let base = DgpSpec {
        family: config.dgp,
        n: 0,
        params: config.params.clone(),
        seed: derive_seed(config.seed, &[stream::ORACLE]),
    };
    let oracle = ConvergenceOracle::build(&base, config.oracle_draws)?;
    let jobs: Vec<(usize, usize)> = config
        .n_grid
        .iter()
        .flat_map(|&n| (0..config.replicates).map(move |r| (n, r)))
        .collect();
    let per_job = par::map_slice(&jobs, |&(n, r)| -> Result<Vec<ResultRow>> {
        let started = Instant::now();
        let seed = derive_seed(config.seed, &[n as u64, r as u64]);
        let spec = DgpSpec {
            n,
            seed,
            ..base.clone()
        };
        let data = spec.generate()?;
        let errors = convergence_replicate(config, &oracle, &data, seed).map_err(|e| {
            Error::invalid(format!("fit convergence failed at n = {n}, replicate {r}: {e}"))
        })?;
        let runtime = if config.record_runtime { started.elapsed().as_secs_f64() } else { 0.0 };
        Ok(errors
            .into_iter()
            .map(|(est, value)| ResultRow {
                suite: Suite::FitConvergence.name().into(),
                statistic: est.name.into(),
                setting: config.dgp.name().into(),
                grid_point: n as f64,
                replicate: r,
                value,
                rejected: None,
                runtime_seconds: runtime,
            })
            .collect())
    });
    let mut rows = Vec::new();
    for r in per_job {
        rows.extend(r?);
    }
    super::output::sort_rows(&mut rows);
    Ok(rows)
}
