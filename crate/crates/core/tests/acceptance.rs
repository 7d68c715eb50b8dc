//! Acceptance criteria. Each test prints one `PASS` or `FAIL` line and then
//! asserts. Run with `cargo test --release --test acceptance -- --nocapture`.

mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::{minus, naive_norm_squared, rel_diff, Instance};
use dr_cme::cme::{fit_cme, CmeModel, Regularizer};
use dr_cme::datagen::{DgpFamily, DgpParams, DgpSpec, ZMode};
use dr_cme::experiments::{run_suite, summarize, ExperimentConfig, Suite, SummaryRow};
use dr_cme::kernels::{self, KernelSpec};
use dr_cme::matching::{build_matched_sets, split_sets, Caliper};
use dr_cme::permutation::{
    run_permutation_test, run_with_statistic, FnStatistic, KernelStatistic, PlanParams, TestConfig,
    TrainableStatistic,
};
use dr_cme::propensity::{fit_logistic, LogisticConfig};
use dr_cme::statistics::closed_form::{dr_date_closed_form_with_scores, dr_dett_closed_form_with_scores};
use dr_cme::statistics::embedding::{dr_embedding_from_scores, dr_ett_embedding_from_scores, ipw_embedding_from_scores};
use dr_cme::statistics::{
    empirical_arm_embedding, mmd_between, DettArms, DettPlugIn, ModelConfig, OutcomeBank, StatisticContext,
    StatisticKind, StatisticValue,
};
use dr_cme::{Arm, PointSet};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// The machine may have a single core; timings are only meaningful one
/// criterion at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration, limit: Duration) {
    let in_time = elapsed <= limit;
    let verdict = if pass && in_time { "PASS" } else { "FAIL" };
    println!(
        "criterion {id} {verdict}: {name}: {detail} [{:.1}s, limit {}s]",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
    assert!(in_time, "criterion {id} ({name}) took {:.1}s", elapsed.as_secs_f64());
}

fn by_key(summary: &[SummaryRow]) -> BTreeMap<(String, u64), &SummaryRow> {
    summary.iter().map(|s| ((s.statistic.clone(), s.grid_point as u64), s)).collect()
}

#[test]
fn criterion_1_closed_form_matches_weighted_embeddings() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for n in [10, 20, 50] {
        for seed in 0..20 {
            let inst = Instance::random(seed, n);
            let kernel = inst.outcome_kernel();
            let bank = OutcomeBank::new(&inst.train.y, &inst.test.y);
            let arm_emb = |arm| {
                dr_embedding_from_scores(&inst.test.t, &inst.e, &inst.test.x, &inst.cme(arm), arm).unwrap()
            };
            let emb = mmd_between(&arm_emb(Arm::Treated), &arm_emb(Arm::Control), &kernel, &bank)
                .unwrap()
                .raw_squared;
            let closed = dr_date_closed_form_with_scores(
                &inst.test,
                &inst.train,
                &inst.e,
                &inst.cme(Arm::Control),
                &inst.cme(Arm::Treated),
                &kernel,
            )
            .unwrap()
            .raw_squared;
            let naive = naive_norm_squared(&minus(&inst.naive_dr(Arm::Treated), &inst.naive_dr(Arm::Control)), inst.hy);
            worst = worst.max(rel_diff(closed, emb)).max(rel_diff(closed, naive));

            for arms in [DettArms::TREATED_ON_CONTROLS, DettArms::CONTROL_ON_TREATED] {
                let dr = dr_ett_embedding_from_scores(
                    &inst.test.t,
                    &inst.e,
                    &inst.test.x,
                    &inst.cme(arms.target),
                    arms.target,
                    arms.population,
                )
                .unwrap();
                let empirical = empirical_arm_embedding(&inst.test.t, arms.population).unwrap();
                let emb = mmd_between(&dr, &empirical, &kernel, &bank).unwrap().raw_squared;
                let closed =
                    dr_dett_closed_form_with_scores(&inst.test, &inst.train, &inst.e, &inst.cme(arms.target), arms, &kernel)
                        .unwrap()
                        .raw_squared;
                let naive = naive_norm_squared(
                    &minus(&inst.naive_dr_ett(arms.target, arms.population), &inst.naive_empirical(arms.population)),
                    inst.hy,
                );
                worst = worst.max(rel_diff(closed, emb)).max(rel_diff(closed, naive));
            }
        }
    }
    report(
        1,
        "closed form equals weighted-embedding MMD",
        worst <= 1e-8,
        &format!("max relative difference {worst:.2e} over 60 instances"),
        started.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn criterion_2_doubly_robust_embeddings_converge() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        suite: Suite::FitConvergence,
        dgp: DgpFamily::DgpAConfounded,
        n_grid: vec![100, 200, 400, 800, 1600],
        replicates: 10,
        oracle_draws: 100_000,
        output_dir: dir.path().to_path_buf(),
        record_runtime: false,
        ..ExperimentConfig::default()
    };
    let rows = run_suite(&config).unwrap();
    let summary = summarize(&rows);
    let s = by_key(&summary);
    let mut failures = Vec::new();
    let mut trace = Vec::new();
    for arm in ["y0", "y1"] {
        let dr = format!("dr_{arm}");
        let ipw = format!("ipw_{arm}");
        let medians: Vec<f64> = config.n_grid.iter().map(|&n| s[&(dr.clone(), n as u64)].median).collect();
        trace.push(format!(
            "{dr} medians [{}]",
            medians.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(", ")
        ));
        for (w, n) in medians.windows(2).zip(config.n_grid.windows(2)) {
            if w[1] >= w[0] {
                failures.push(format!("{dr} rises {:.4} -> {:.4} at n={} -> {}", w[0], w[1], n[0], n[1]));
            }
        }
        let (d, i) = (s[&(dr.clone(), 1600)].median, s[&(ipw.clone(), 1600)].median);
        trace.push(format!("n=1600 {dr} {d:.4} vs {ipw} {i:.4}"));
        if d >= i {
            failures.push(format!("{dr} {d:.4} not below {ipw} {i:.4} at n=1600"));
        }
    }
    let detail = if failures.is_empty() {
        trace.join("; ")
    } else {
        format!("{}; {}", failures.join("; "), trace.join("; "))
    };
    report(
        2,
        "doubly robust embedding error decreases and beats inverse weighting",
        failures.is_empty(),
        &detail,
        started.elapsed(),
        Duration::from_secs(600),
    );
}

#[test]
fn criterion_3_type_one_error_is_controlled() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        suite: Suite::PowerCurve,
        dgp: DgpFamily::DgpEffect,
        n: 500,
        beta_grid: vec![0.0],
        z_modes: vec![ZMode::One],
        replicates: 200,
        statistics: StatisticKind::KERNEL_STATISTICS.to_vec(),
        output_dir: dir.path().to_path_buf(),
        record_runtime: false,
        test: TestConfig {
            plan: PlanParams {
                m: 200,
                n_train_perms: 20,
                ..PlanParams::default()
            },
            ..TestConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let summary = summarize(&run_suite(&config).unwrap());
    assert_eq!(summary.len(), 4);
    let rates: Vec<(String, f64)> = summary.iter().map(|s| (s.statistic.clone(), s.rejection_rate.unwrap())).collect();
    let pass = rates.iter().all(|(_, r)| (0.0..=0.08).contains(r));
    let detail = rates.iter().map(|(k, r)| format!("{k} {r:.3}")).collect::<Vec<_>>().join(", ");
    report(3, "rejection rate under the null at most 0.08", pass, &detail, started.elapsed(), Duration::from_secs(1200));
}

#[test]
fn criterion_4_power_against_a_variance_only_effect() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        suite: Suite::PowerCurve,
        dgp: DgpFamily::DgpEffect,
        n: 2000,
        params: DgpParams {
            z_mode: ZMode::Bernoulli,
            ..DgpParams::default()
        },
        beta_grid: vec![3.0],
        z_modes: vec![ZMode::Bernoulli],
        replicates: 50,
        statistics: vec![StatisticKind::Date, StatisticKind::DrDate, StatisticKind::MeanDrBaseline],
        output_dir: dir.path().to_path_buf(),
        record_runtime: false,
        ..ExperimentConfig::default()
    };
    let summary = summarize(&run_suite(&config).unwrap());
    let rate = |kind: StatisticKind| {
        summary
            .iter()
            .find(|s| s.statistic == kind.name())
            .and_then(|s| s.rejection_rate)
            .unwrap()
    };
    let (date, dr_date, baseline) =
        (rate(StatisticKind::Date), rate(StatisticKind::DrDate), rate(StatisticKind::MeanDrBaseline));
    report(
        4,
        "kernel tests reject a variance-only effect and the mean baseline does not",
        date >= 0.8 && dr_date >= 0.8 && baseline <= 0.15,
        &format!("DATE {date:.2}, DR-DATE {dr_date:.2}, mean baseline {baseline:.2}"),
        started.elapsed(),
        Duration::from_secs(1800),
    );
}

/// Random matched sets of sizes 2 to 4 with one treated unit each, labels
/// assigned uniformly within sets. Returns labels and fold-local groups.
fn null_fold(rng: &mut impl Rng, sets: usize) -> (Vec<Arm>, Vec<Vec<usize>>) {
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for _ in 0..sets {
        let size = rng.random_range(2..=4);
        let start = labels.len();
        let treated = rng.random_range(0..size);
        labels.extend((0..size).map(|k| if k == treated { Arm::Treated } else { Arm::Control }));
        groups.push((start..start + size).collect());
    }
    (labels, groups)
}

fn arm_mean_gap(labels: &[Arm], values: &[f64]) -> f64 {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (l, v) in labels.iter().zip(values) {
        sums[l.index()] += v;
        counts[l.index()] += 1;
    }
    sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64
}

#[test]
fn criterion_5_p_values_are_super_uniform() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let replicates = 500;
    let alphas = [0.05, 0.1];
    let mut hits = [0usize; 2];
    let mut rng = common::rng(2024);
    for r in 0..replicates {
        let (train_t, train_groups) = null_fold(&mut rng, 30);
        let (test_t, test_groups) = null_fold(&mut rng, 30);
        let train_y: Vec<f64> = (0..train_t.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let test_y: Vec<f64> = (0..test_t.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let stat = FnStatistic {
            kind: StatisticKind::Date,
            f: |train: &[Arm], test: &[Arm]| {
                (arm_mean_gap(test, &test_y) + 0.5 * arm_mean_gap(train, &train_y)).abs()
            },
        };
        let params = PlanParams {
            n_train_perms: 5,
            m: 99,
            seed: r,
            ..PlanParams::default()
        };
        let p = run_with_statistic(&stat, &train_t, &test_t, &train_groups, &test_groups, &params).unwrap()[0].p_value;
        for (k, a) in alphas.iter().enumerate() {
            if p <= *a {
                hits[k] += 1;
            }
        }
    }
    let mut pass = true;
    let mut detail = Vec::new();
    for (k, a) in alphas.iter().enumerate() {
        let rate = hits[k] as f64 / replicates as f64;
        let bound = a + 2.0 * (a * (1.0 - a) / replicates as f64).sqrt();
        pass &= rate <= bound;
        detail.push(format!("P(p <= {a}) = {rate:.3} (bound {bound:.3})"));
    }
    report(5, "permutation p-values are valid", pass, &detail.join(", "), started.elapsed(), Duration::from_secs(120));
}

struct Counting {
    inner: KernelStatistic,
    fits: AtomicUsize,
}

impl TrainableStatistic for Counting {
    type Bundle = <KernelStatistic as TrainableStatistic>::Bundle;

    fn kinds(&self) -> Vec<StatisticKind> {
        self.inner.kinds()
    }

    fn fit(&self, train_labels: &[Arm]) -> dr_cme::Result<Self::Bundle> {
        self.fits.fetch_add(1, Ordering::SeqCst);
        self.inner.fit(train_labels)
    }

    fn evaluate(&self, bundle: &Self::Bundle, test_labels: &[Arm]) -> dr_cme::Result<Vec<StatisticValue>> {
        self.inner.evaluate(bundle, test_labels)
    }
}

#[test]
fn criterion_6_one_fit_per_train_labelling() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let n_perms = 20;
    let data = DgpSpec::new(DgpFamily::DgpEffect, 400, 3).generate().unwrap();
    let prop = fit_logistic(&data.x, &data.t, &LogisticConfig::default()).unwrap();
    let matched = build_matched_sets(&data, &prop, Caliper::default(), 1).unwrap();
    let fold = split_sets(&matched, 0.5, 1).unwrap();
    let (train_idx, test_idx) = fold.fold_indices(&matched);
    let (train_groups, test_groups) = fold.local_groups(&matched);
    let (train, test) = (data.subset(&train_idx), data.subset(&test_idx));
    let mut counts = Vec::new();
    for m in [10, 1000] {
        let stat = Counting {
            inner: KernelStatistic {
                context: StatisticContext::new(
                    &train.x,
                    &train.y,
                    &test.x,
                    &test.y,
                    None,
                    None,
                    ModelConfig::default(),
                    &[StatisticKind::DrDate, StatisticKind::DrDett, StatisticKind::MeanDrBaseline],
                )
                .unwrap(),
            },
            fits: AtomicUsize::new(0),
        };
        let params = PlanParams {
            n_train_perms: n_perms,
            m,
            seed: 5,
            ..PlanParams::default()
        };
        let results = run_with_statistic(&stat, &train.t, &test.t, &train_groups, &test_groups, &params).unwrap();
        counts.push((m, stat.fits.load(Ordering::SeqCst), results[0].diagnostics.bundles_fit));

        let config = TestConfig {
            plan: params,
            ..TestConfig::default()
        };
        let outcome = run_permutation_test(&data, &StatisticKind::KERNEL_STATISTICS, &config).unwrap();
        counts.extend(outcome.results.iter().map(|r| (m, r.diagnostics.bundles_fit, r.diagnostics.bundles_fit)));
    }
    let pass = counts.iter().all(|&(_, a, b)| a == n_perms + 1 && b == n_perms + 1);
    let detail = [10, 1000]
        .iter()
        .map(|&m| {
            let mut seen: Vec<usize> = counts.iter().filter(|c| c.0 == m).flat_map(|c| [c.1, c.2]).collect();
            seen.sort_unstable();
            seen.dedup();
            format!("m={m}: fit counts {seen:?}")
        })
        .collect::<Vec<_>>()
        .join(", ");
    report(6, "N + 1 model fits whatever m", pass, &detail, started.elapsed(), Duration::from_secs(60));
}

fn random_points(rng: &mut impl Rng, n: usize, d: usize) -> PointSet {
    let v: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    PointSet::new(d, v).unwrap()
}

fn flip(labels: &[Arm]) -> Vec<Arm> {
    labels.iter().map(|a| a.other()).collect()
}

#[test]
fn criterion_7_property_suites() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let mut rng = common::rng(7);
    let mut failures: Vec<String> = Vec::new();

    let mut min_eig: f64 = f64::INFINITY;
    let mut symmetric = true;
    for case in 0..50 {
        let n = rng.random_range(2..40);
        let d = rng.random_range(1..5);
        let pts = random_points(&mut rng, n, d);
        let spec = KernelSpec::gaussian(rng.random_range(0.05..5.0)).unwrap();
        let g = kernels::self_gram(&spec, &pts);
        symmetric &= g == g.transpose();
        symmetric &= spec.eval(pts.point(0), pts.point(1)).unwrap() == spec.eval(pts.point(1), pts.point(0)).unwrap();
        let eig = g.symmetric_eigen().eigenvalues.min();
        min_eig = min_eig.min(eig / n as f64);
        if eig < -1e-10 * n as f64 {
            failures.push(format!("Gram case {case} has eigenvalue {eig:.2e}"));
        }
    }
    if !symmetric {
        failures.push("asymmetric kernel".into());
    }

    let mut worst_residual: f64 = 0.0;
    for seed in 0..20 {
        let inst = Instance::random(seed, 40);
        for arm in Arm::BOTH {
            let lambda = [1e-3, 0.1, 10.0][seed as usize % 3];
            let cme = fit_cme(&inst.train, arm, inst.covariate_kernel(), Regularizer::Fixed(lambda)).unwrap();
            let mut k = kernels::self_gram(&cme.covariate_kernel, &cme.train_points);
            for i in 0..k.nrows() {
                k[(i, i)] += cme.lambda;
            }
            let eye = nalgebra::DMatrix::<f64>::identity(k.nrows(), k.nrows());
            worst_residual = worst_residual.max((&k * &cme.weight_matrix - eye).amax());
        }
    }
    if worst_residual > 1e-8 {
        failures.push(format!("ridge residual {worst_residual:.2e}"));
    }

    for seed in 0..20 {
        let inst = Instance::random(seed, 30);
        for arm in Arm::BOTH {
            let idx = inst.train.arm_indices(arm);
            let zero = CmeModel::zero(arm, idx.clone(), inst.train.x.select(&idx), inst.covariate_kernel());
            let dr = dr_embedding_from_scores(&inst.test.t, &inst.e, &inst.test.x, &zero, arm).unwrap();
            if dr.coefficients() != ipw_embedding_from_scores(&inst.test.t, &inst.e, arm).coefficients() {
                failures.push(format!("zero CME does not reduce to weighting (seed {seed})"));
            }
        }
    }

    let mut worst_symmetry: f64 = 0.0;
    for seed in 0..5 {
        let inst = Instance::random(seed, 40);
        let model = |arms: DettArms| ModelConfig {
            logistic: LogisticConfig {
                tol: 1e-14,
                ..LogisticConfig::default()
            },
            dett_arms: arms,
            dett_plug_in: DettPlugIn::Cme,
            ..ModelConfig::default()
        };
        let ctx = |arms| {
            StatisticContext::new(
                &inst.train.x,
                &inst.train.y,
                &inst.test.x,
                &inst.test.y,
                None,
                None,
                model(arms),
                &StatisticKind::KERNEL_STATISTICS,
            )
            .unwrap()
        };
        let (a, b) = (ctx(DettArms::TREATED_ON_CONTROLS), ctx(DettArms::CONTROL_ON_TREATED));
        let fa = a.fit(&inst.train.t).unwrap();
        let fb = b.fit(&flip(&inst.train.t)).unwrap();
        for kind in StatisticKind::KERNEL_STATISTICS {
            let v = a.evaluate(&fa, kind, &inst.test.t).unwrap().mmd_squared;
            let w = b.evaluate(&fb, kind, &flip(&inst.test.t)).unwrap().mmd_squared;
            worst_symmetry = worst_symmetry.max(rel_diff(v, w));
        }
    }
    if worst_symmetry > 1e-10 {
        failures.push(format!("relabelling symmetry off by {worst_symmetry:.2e}"));
    }

    let families = [DgpFamily::DgpAConfounded, DgpFamily::DgpBRandomized, DgpFamily::DgpEffect];
    let modes = [ZMode::One, ZMode::Bernoulli, ZMode::Uniform];
    for case in 0..30u64 {
        let mut modes = modes.to_vec();
        modes.shuffle(&mut rng);
        let spec = DgpSpec::new(families[case as usize % 3], rng.random_range(1..300), rng.random()).with_params(
            DgpParams {
                beta: rng.random_range(-3.0..3.0),
                z_mode: modes[0],
                ..DgpParams::default()
            },
        );
        let ds = spec.generate().unwrap();
        if !ds.is_consistent() || ds != spec.generate().unwrap() {
            failures.push(format!("DGP case {case} inconsistent or not reproducible"));
        }
    }

    let detail = if failures.is_empty() {
        format!(
            "min Gram eigenvalue / n {min_eig:.1e}, ridge residual {worst_residual:.1e}, relabelling {worst_symmetry:.1e}"
        )
    } else {
        failures.join("; ")
    };
    report(7, "property suites", failures.is_empty(), &detail, started.elapsed(), Duration::from_secs(120));
}
