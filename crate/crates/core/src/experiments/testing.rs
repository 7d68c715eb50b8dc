//! Suites built on the permutation test.

use std::time::Instant;

use rand::seq::index::sample;

use crate::data::Dataset;
use crate::datagen::{load_counterfactual_csv, DgpSpec};
use crate::error::{Error, Result};
use crate::par;
use crate::permutation::{run_permutation_test, TestConfig, TestOutcome};
use crate::rng::{derive_seed, stream, substream};

use super::{ExperimentConfig, ResultRow, Suite};

const PLAN_STREAM: u64 = 0x504C_414E;

fn test_rows(
    suite: Suite,
    setting: &str,
    grid_point: f64,
    replicate: usize,
    outcome: &TestOutcome,
    alpha: f64,
    runtime: f64,
) -> Vec<ResultRow> {
    outcome
        .results
        .iter()
        .map(|r| ResultRow {
            suite: suite.name().into(),
            statistic: r.kind.name().into(),
            setting: setting.into(),
            grid_point,
            replicate,
            value: r.p_value,
            rejected: Some(r.p_value <= alpha),
            runtime_seconds: runtime,
        })
        .collect()
}

fn collect(per_job: Vec<Result<Vec<ResultRow>>>) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for r in per_job {
        rows.extend(r?);
    }
    super::output::sort_rows(&mut rows);
    Ok(rows)
}

fn seeded_test(config: &ExperimentConfig, seed: u64) -> TestConfig {
    let mut test = config.test.clone();
    test.plan.seed = derive_seed(seed, &[PLAN_STREAM]);
    test
}

/// Permutation tests on the effect DGP over the `beta` grid and `Z` modes;
/// one p-value row per statistic and replicate.
pub fn run_power_curve(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let mut jobs = Vec::new();
    for (bi, &beta) in config.beta_grid.iter().enumerate() {
        for (zi, &z) in config.z_modes.iter().enumerate() {
            for r in 0..config.replicates {
                jobs.push((bi, beta, zi, z, r));
            }
        }
    }
    let per_job = par::map_slice(&jobs, |&(bi, beta, zi, z, r)| {
        let started = Instant::now();
        let seed = derive_seed(config.seed, &[bi as u64, zi as u64, r as u64]);
        let mut params = config.params.clone();
        params.beta = beta;
        params.z_mode = z;
        let data = DgpSpec {
            family: config.dgp,
            n: config.n,
            params,
            seed,
        }
        .generate()?;
        let outcome = run_permutation_test(&data, &config.statistics, &seeded_test(config, seed))
            .map_err(|e| Error::invalid(format!("beta = {beta}, z = {}, replicate {r}: {e}", z.name())))?;
        let runtime = if config.record_runtime { started.elapsed().as_secs_f64() } else { 0.0 };
        Ok(test_rows(Suite::PowerCurve, z.name(), beta, r, &outcome, config.alpha, runtime))
    });
    collect(per_job)
}

/// The no-effect world of a counterfactual dataset: every outcome,
/// factual and counterfactual, is replaced by `Y(0)`.
pub fn null_world(ds: &Dataset) -> Result<Dataset> {
    let y0 = ds
        .y0
        .clone()
        .ok_or_else(|| Error::Config("calibration needs counterfactual columns".into()))?;
    Ok(Dataset {
        y: y0.clone(),
        y1: Some(y0.clone()),
        y0: Some(y0),
        ..ds.clone()
    })
}

/// Rejection rates on a counterfactual CSV under the null world (`H0`) and
/// the data as given (`H1`); each replicate subsamples rows without
/// replacement. The grid point is the replicate's row count.
pub fn run_calibration_csv(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let path = config.csv.as_ref().ok_or_else(|| Error::Config("no CSV given".into()))?;
    let data = load_counterfactual_csv(path, &config.schema)?;
    if data.y0.is_none() || data.y1.is_none() {
        return Err(Error::Config(format!(
            "{} has no counterfactual columns",
            path.display()
        )));
    }
    let h0 = null_world(&data)?;
    let n = data.n();
    let keep = ((config.subsample * n as f64).round() as usize).clamp(1, n);
    let mut jobs = Vec::new();
    for r in 0..config.replicates {
        for world in ["H0", "H1"] {
            jobs.push((r, world));
        }
    }
    let per_job = par::map_slice(&jobs, |&(r, world)| {
        let started = Instant::now();
        let seed = derive_seed(config.seed, &[r as u64]);
        let mut idx = sample(&mut substream(seed, stream::SUBSAMPLE), n, keep).into_vec();
        idx.sort_unstable();
        let source = if world == "H0" { &h0 } else { &data };
        let ds = source.subset(&idx);
        let outcome = run_permutation_test(&ds, &config.statistics, &seeded_test(config, seed))
            .map_err(|e| Error::invalid(format!("{world}, replicate {r}: {e}")))?;
        let runtime = if config.record_runtime { started.elapsed().as_secs_f64() } else { 0.0 };
        Ok(test_rows(Suite::Calibration, world, keep as f64, r, &outcome, config.alpha, runtime))
    });
    collect(per_job)
}

/// One test on the configured CSV, or on a draw from the configured DGP
/// when no CSV is given.
pub fn run_single_test(config: &ExperimentConfig) -> Result<TestOutcome> {
    config.validate()?;
    let data = match &config.csv {
        Some(path) => load_counterfactual_csv(path, &config.schema)?,
        None => DgpSpec {
            family: config.dgp,
            n: config.n,
            params: config.params.clone(),
            seed: config.seed,
        }
        .generate()?,
    };
    let mut test = config.test.clone();
    test.plan.seed = config.seed;
    run_permutation_test(&data, &config.statistics, &test)
}
