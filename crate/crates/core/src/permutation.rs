//! Permutation test over matched sets with amortised model fits.
//!
//! Train-side labellings `sigma_0 = id, sigma_1..sigma_N` are drawn once and
//! a model bundle is fitted for each. Every permuted statistic then pairs a
//! uniformly chosen cached bundle with a fresh within-set permutation of the
//! test labels, so the number of fits is `N + 1` however large `m` is.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::matching::{build_matched_sets, split_sets, Caliper, FoldAssignment, MatchedSets};
use crate::propensity::fit_logistic;
use crate::rng::{derive_seed, stream, substream, StreamRng};
use crate::statistics::{FittedBundle, ModelConfig, StatisticContext, StatisticKind, StatisticValue};
use crate::par;

/// Uniform shuffle inside each set; indices outside every set stay fixed.
/// Returns `perm` with `perm[i]` the source position for position `i`.
pub fn sample_within_set_permutation(sets: &[Vec<usize>], n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut buf = Vec::new();
    for set in sets {
        buf.clear();
        buf.extend_from_slice(set);
        buf.shuffle(rng);
        for (&dst, &src) in set.iter().zip(&buf) {
            perm[dst] = src;
        }
    }
    perm
}

/// `labels[perm[i]]` for every `i`.
pub fn apply_permutation(labels: &[Arm], perm: &[usize]) -> Vec<Arm> {
    perm.iter().map(|&j| labels[j]).collect()
}

/// Size and seeding of one permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanParams {
    /// Number of non-identity train labellings `N`.
    pub n_train_perms: usize,
    /// Number of permuted statistics `m`.
    pub m: usize,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            n_train_perms: 20,
            m: 200,
            train_ratio: 0.5,
            seed: 0,
        }
    }
}

/// Train labellings and the draw schedule of a test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub fold: Option<FoldAssignment>,
    /// `N + 1` within-set permutations of the train fold; the first is the
    /// identity.
    pub train_perms: Vec<Vec<usize>>,
    pub n_train_perms: usize,
    pub m: usize,
    pub seed: u64,
}

impl PermutationPlan {
    pub fn new(train_groups: &[Vec<usize>], n_train: usize, params: &PlanParams) -> Self {
        let base = derive_seed(params.seed, &[stream::TRAIN_PERMS]);
        let mut train_perms = vec![(0..n_train).collect::<Vec<_>>()];
        train_perms.extend((1..=params.n_train_perms).map(|j| {
            sample_within_set_permutation(train_groups, n_train, &mut substream(base, j as u64))
        }));
        Self {
            fold: None,
            train_perms,
            n_train_perms: params.n_train_perms,
            m: params.m,
            seed: params.seed,
        }
    }

    /// Bundle index and test permutation of permuted draw `i`.
    pub fn draw(&self, i: usize, test_groups: &[Vec<usize>], n_test: usize) -> (usize, Vec<usize>) {
        let mut rng = substream(derive_seed(self.seed, &[stream::TEST_PERMS]), i as u64);
        let sigma = rng.random_range(0..=self.n_train_perms);
        (sigma, sample_within_set_permutation(test_groups, n_test, &mut rng))
    }
}

/// A statistic whose models are fitted on train labels and evaluated on
/// test labels; one evaluation yields one value per kind.
pub trait TrainableStatistic: Sync {
    type Bundle: Send + Sync;

    fn kinds(&self) -> Vec<StatisticKind>;

    fn fit(&self, train_labels: &[Arm]) -> Result<Self::Bundle>;

    fn evaluate(&self, bundle: &Self::Bundle, test_labels: &[Arm]) -> Result<Vec<StatisticValue>>;

    /// Identifies label-independent state (kernels); `None` if not
    /// applicable.
    fn fingerprint(&self) -> Option<u64> {
        None
    }
}

/// The kernel statistics over a precomputed train/test context.
#[derive(Debug, Clone)]
pub struct KernelStatistic {
    pub context: StatisticContext,
}

impl TrainableStatistic for KernelStatistic {
    type Bundle = FittedBundle;

    fn kinds(&self) -> Vec<StatisticKind> {
        self.context.kinds().to_vec()
    }

    fn fit(&self, train_labels: &[Arm]) -> Result<FittedBundle> {
        self.context.fit(train_labels)
    }

    fn evaluate(&self, bundle: &FittedBundle, test_labels: &[Arm]) -> Result<Vec<StatisticValue>> {
        self.context
            .kinds()
            .iter()
            .map(|&k| self.context.evaluate(bundle, k, test_labels))
            .collect()
    }

    fn fingerprint(&self) -> Option<u64> {
        Some(self.context.kernel_fingerprint())
    }
}

/// Adapter turning a closure `f(train_labels, test_labels) -> value` into a
/// single-valued statistic. Fitting just stores the train labels.
pub struct FnStatistic<F> {
    pub kind: StatisticKind,
    pub f: F,
}

impl<F> TrainableStatistic for FnStatistic<F>
where
    F: Fn(&[Arm], &[Arm]) -> f64 + Sync,
{
    type Bundle = Vec<Arm>;

    fn kinds(&self) -> Vec<StatisticKind> {
        vec![self.kind]
    }

    fn fit(&self, train_labels: &[Arm]) -> Result<Vec<Arm>> {
        Ok(train_labels.to_vec())
    }

    fn evaluate(&self, bundle: &Vec<Arm>, test_labels: &[Arm]) -> Result<Vec<StatisticValue>> {
        Ok(vec![StatisticValue::from_abs(self.kind, (self.f)(bundle, test_labels))])
    }
}

/// Counts and timings of one test.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub bundles_fit: usize,
    pub n_train_perms: usize,
    pub m: usize,
    pub n_sets: usize,
    pub n_unmatched: usize,
    pub caliper: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub fit_seconds: f64,
    pub eval_seconds: f64,
    pub kernel_fingerprint: Option<u64>,
    pub negative_warnings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: StatisticKind,
    pub observed: StatisticValue,
    pub permuted: Vec<StatisticValue>,
    pub p_value: f64,
    pub diagnostics: Diagnostics,
}

/// `(1 + #{permuted >= observed}) / (m + 1)`.
pub fn permutation_p_value(observed: f64, permuted: impl IntoIterator<Item = f64>) -> f64 {
    let mut m = 0usize;
    let mut hits = 0usize;
    for v in permuted {
        m += 1;
        if v >= observed {
            hits += 1;
        }
    }
    (1 + hits) as f64 / (m + 1) as f64
}

/// Runs the scheme for an already-split sample: `train_labels` and
/// `test_labels` are the observed treatments of each fold and the groups
/// are the matched sets in fold-local coordinates.
pub fn run_with_statistic<S: TrainableStatistic>(
    statistic: &S,
    train_labels: &[Arm],
    test_labels: &[Arm],
    train_groups: &[Vec<usize>],
    test_groups: &[Vec<usize>],
    params: &PlanParams,
) -> Result<Vec<TestResult>> {
    if params.m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    let plan = PermutationPlan::new(train_groups, train_labels.len(), params);
    run_plan(statistic, &plan, train_labels, test_labels, test_groups)
}

/// Like [`run_with_statistic`] with an explicit plan.
pub fn run_plan<S: TrainableStatistic>(
    statistic: &S,
    plan: &PermutationPlan,
    train_labels: &[Arm],
    test_labels: &[Arm],
    test_groups: &[Vec<usize>],
) -> Result<Vec<TestResult>> {
    let kinds = statistic.kinds();
    let fits = AtomicUsize::new(0);
    let started = Instant::now();
    let bundles = par::try_map_range(plan.train_perms.len(), |sigma| {
        fits.fetch_add(1, Ordering::Relaxed);
        statistic
            .fit(&apply_permutation(train_labels, &plan.train_perms[sigma]))
            .map_err(|e| Error::BundleFitFailed {
                sigma,
                source: Box::new(e),
            })
    })?;
    let fit_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let observed = statistic
        .evaluate(&bundles[0], test_labels)
        .map_err(|e| Error::PermutationFailed {
            index: 0,
            sigma: 0,
            source: Box::new(e),
        })?;
    let n_test = test_labels.len();
    let permuted = par::try_map_range(plan.m, |i| {
        let (sigma, pi) = plan.draw(i, test_groups, n_test);
        statistic
            .evaluate(&bundles[sigma], &apply_permutation(test_labels, &pi))
            .map_err(|e| Error::PermutationFailed {
                index: i + 1,
                sigma,
                source: Box::new(e),
            })
    })?;
    let eval_seconds = started.elapsed().as_secs_f64();

    let base = Diagnostics {
        bundles_fit: fits.load(Ordering::Relaxed),
        n_train_perms: plan.n_train_perms,
        m: plan.m,
        n_train: train_labels.len(),
        n_test,
        fit_seconds,
        eval_seconds,
        kernel_fingerprint: statistic.fingerprint(),
        ..Diagnostics::default()
    };
    Ok(kinds
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let obs = observed[k];
            let perm: Vec<StatisticValue> = permuted.iter().map(|v| v[k]).collect();
            let p_value = permutation_p_value(obs.mmd, perm.iter().map(|v| v.mmd));
            let negative_warnings =
                usize::from(obs.negative_warning) + perm.iter().filter(|v| v.negative_warning).count();
            TestResult {
                kind,
                observed: obs,
                permuted: perm,
                p_value,
                diagnostics: Diagnostics {
                    negative_warnings,
                    ..base.clone()
                },
            }
        })
        .collect())
}

/// Full test configuration on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    pub plan: PlanParams,
    pub model: ModelConfig,
    pub caliper: Caliper,
    pub controls_per_set: usize,
    /// Fixed covariate kernel; median heuristic when `None`.
    pub covariate_kernel: Option<KernelSpec>,
    /// Fixed outcome kernel; median heuristic when `None`.
    pub outcome_kernel: Option<KernelSpec>,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            plan: PlanParams::default(),
            model: ModelConfig::default(),
            caliper: Caliper::default(),
            controls_per_set: 1,
            covariate_kernel: None,
            outcome_kernel: None,
        }
    }
}

/// Results of [`run_permutation_test`] with the matching it used.
#[derive(Debug, Clone)]
pub struct TestOutcome {
    pub results: Vec<TestResult>,
    pub matched: MatchedSets,
    pub fold: FoldAssignment,
}

impl TestOutcome {
    pub fn result(&self, kind: StatisticKind) -> Option<&TestResult> {
        self.results.iter().find(|r| r.kind == kind)
    }
}

/// Matches on a logistic propensity fitted to the whole sample, splits
/// whole sets into folds and runs the permutation scheme for `kinds`.
/// Unmatched samples take no part in the test apart from the default
/// median-heuristic bandwidths, which use every row.
pub fn run_permutation_test(data: &Dataset, kinds: &[StatisticKind], config: &TestConfig) -> Result<TestOutcome> {
    data.validate()?;
    if kinds.is_empty() {
        return Err(Error::invalid("no statistics requested"));
    }
    let prop = fit_logistic(&data.x, &data.t, &config.model.logistic)?;
    let matched = build_matched_sets(data, &prop, config.caliper, config.controls_per_set)?;
    let fold = split_sets(&matched, config.plan.train_ratio, config.plan.seed)?;
    let (train_idx, test_idx) = fold.fold_indices(&matched);
    let (train_groups, test_groups) = fold.local_groups(&matched);
    let train = data.subset(&train_idx);
    let test = data.subset(&test_idx);
    let covariate_kernel = match config.covariate_kernel {
        Some(k) => k,
        None => KernelSpec::gaussian_median(&Standardizer::fit(&train.x).transform(&data.x))?,
    };
    let outcome_kernel = match config.outcome_kernel {
        Some(k) => k,
        None => KernelSpec::gaussian_median(&data.y)?,
    };
    let context = StatisticContext::new(
        &train.x,
        &train.y,
        &test.x,
        &test.y,
        Some(covariate_kernel),
        Some(outcome_kernel),
        config.model.clone(),
        kinds,
    )?;
    let statistic = KernelStatistic { context };
    let mut results = run_with_statistic(&statistic, &train.t, &test.t, &train_groups, &test_groups, &config.plan)?;
    for r in &mut results {
        r.diagnostics.n_sets = matched.n_sets();
        r.diagnostics.n_unmatched = matched.unmatched.len();
        r.diagnostics.caliper = matched.caliper;
    }
    Ok(TestOutcome { results, matched, fold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(k: usize) -> Vec<Vec<usize>> {
        (0..k).map(|i| vec![2 * i, 2 * i + 1]).collect()
    }

    fn alternating(n: usize) -> Vec<Arm> {
        (0..n).map(|i| if i % 2 == 0 { Arm::Treated } else { Arm::Control }).collect()
    }

    #[test]
    fn singleton_sets_give_identity() {
        let sets: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();
        let mut rng = substream(1, 1);
        for _ in 0..20 {
            assert_eq!(sample_within_set_permutation(&sets, 5, &mut rng), vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn outside_indices_are_fixed_points() {
        let mut rng = substream(2, 1);
        for _ in 0..50 {
            let p = sample_within_set_permutation(&[vec![1, 3]], 5, &mut rng);
            assert_eq!((p[0], p[2], p[4]), (0, 2, 4));
        }
    }

    #[test]
    fn pair_swaps_half_the_time() {
        let mut swaps = 0;
        for i in 0..1000 {
            let p = sample_within_set_permutation(&[vec![0, 1]], 2, &mut substream(3, i));
            if p == [1, 0] {
                swaps += 1;
            }
        }
        let f = swaps as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&f), "swap frequency {f}");
    }

    #[test]
    fn constant_statistic_gives_p_one() {
        let stat = FnStatistic { kind: StatisticKind::Mmd, f: |_: &[Arm], _: &[Arm]| 1.0 };
        let t = alternating(8);
        let params = PlanParams { m: 50, n_train_perms: 3, ..PlanParams::default() };
        let r = run_with_statistic(&stat, &t, &t, &pairs(4), &pairs(4), &params).unwrap();
        assert_eq!(r[0].p_value, 1.0);
        assert_eq!(r[0].permuted.len(), 50);
        assert_eq!(r[0].diagnostics.bundles_fit, 4);
    }

    #[test]
    fn strictly_largest_observed_gives_minimal_p() {
        // Observed labels are the only ones with every treated unit first.
        let observed = alternating(20);
        let stat = FnStatistic {
            kind: StatisticKind::Mmd,
            f: move |_: &[Arm], test: &[Arm]| if test == alternating(20).as_slice() { 1.0 } else { 0.0 },
        };
        let params = PlanParams { m: 9, n_train_perms: 2, seed: 5, ..PlanParams::default() };
        let r = run_with_statistic(&stat, &observed, &observed, &pairs(10), &pairs(10), &params).unwrap();
        // 2^-10 chance per draw of reproducing the observed labels
        assert!(r[0].p_value <= 0.2 + 1e-12);
        let p = permutation_p_value(2.0, [1.0; 9]);
        assert!((p - 0.1).abs() < 1e-15);
    }

    #[test]
    fn failure_reports_permutation_index() {
        let stat = FnStatistic { kind: StatisticKind::Mmd, f: |_: &[Arm], _: &[Arm]| f64::NAN };
        struct Failing;
        impl TrainableStatistic for Failing {
            type Bundle = ();
            fn kinds(&self) -> Vec<StatisticKind> {
                vec![StatisticKind::Mmd]
            }
            fn fit(&self, _: &[Arm]) -> Result<()> {
                Ok(())
            }
            fn evaluate(&self, _: &(), test: &[Arm]) -> Result<Vec<StatisticValue>> {
                if test[0] == Arm::Control {
                    Err(Error::invalid("boom"))
                } else {
                    Ok(vec![StatisticValue::from_abs(StatisticKind::Mmd, 0.0)])
                }
            }
        }
        let t = alternating(4);
        let params = PlanParams { m: 40, n_train_perms: 1, ..PlanParams::default() };
        let err = run_with_statistic(&Failing, &t, &t, &pairs(2), &pairs(2), &params).unwrap_err();
        assert!(matches!(err, Error::PermutationFailed { index, .. } if index >= 1));
        let _ = stat;
    }

    #[test]
    fn fit_count_is_independent_of_m() {
        let stat = FnStatistic { kind: StatisticKind::Mmd, f: |a: &[Arm], b: &[Arm]| a[0].as_f64() + b[0].as_f64() };
        let t = alternating(10);
        for m in [10, 1000] {
            let params = PlanParams { m, n_train_perms: 7, ..PlanParams::default() };
            let r = run_with_statistic(&stat, &t, &t, &pairs(5), &pairs(5), &params).unwrap();
            assert_eq!(r[0].diagnostics.bundles_fit, 8);
        }
    }

    #[test]
    fn plan_is_deterministic_and_starts_with_identity() {
        let params = PlanParams { n_train_perms: 5, seed: 11, ..PlanParams::default() };
        let a = PermutationPlan::new(&pairs(6), 12, &params);
        let b = PermutationPlan::new(&pairs(6), 12, &params);
        assert_eq!(a, b);
        assert_eq!(a.train_perms.len(), 6);
        assert_eq!(a.train_perms[0], (0..12).collect::<Vec<_>>());
        assert_eq!(a.draw(3, &pairs(6), 12), b.draw(3, &pairs(6), 12));
    }

    proptest! {
        #[test]
        fn p_value_on_grid(obs in 0.0f64..1.0, perm in prop::collection::vec(0.0f64..1.0, 1..60)) {
            let m = perm.len();
            let p = permutation_p_value(obs, perm);
            let j = p * (m + 1) as f64 - 1.0;
            prop_assert!((j - j.round()).abs() < 1e-9 && j.round() >= 0.0 && j.round() <= m as f64);
        }

        #[test]
        fn train_perms_preserve_sets(k in 1usize..20, seed in any::<u64>()) {
            let params = PlanParams { n_train_perms: 4, seed, ..PlanParams::default() };
            let plan = PermutationPlan::new(&pairs(k), 2 * k, &params);
            for perm in &plan.train_perms {
                for (i, &j) in perm.iter().enumerate() {
                    prop_assert_eq!(i / 2, j / 2);
                }
            }
        }
    }
}
