//! Experiment suites behind the command-line tool: embedding convergence,
//! power curves, counterfactual-CSV calibration and single tests.

mod config;
mod convergence;
mod output;
mod testing;

pub use config::{ExperimentConfig, Suite};
pub use convergence::{run_fit_convergence, ConvergenceOracle, Estimator, ESTIMATORS};
pub use output::{
    read_results, read_summary, summarize, write_results, write_summary, write_suite_outputs, ResultRow,
    SummaryRow, RESULT_COLUMNS, SUMMARY_COLUMNS,
};
pub use testing::{null_world, run_calibration_csv, run_power_curve, run_single_test};

use crate::error::Result;

/// Runs the suite named in `config` and returns its rows.
pub fn run_suite(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    match config.suite {
        Suite::FitConvergence => run_fit_convergence(config),
        Suite::PowerCurve => run_power_curve(config),
        Suite::Calibration => run_calibration_csv(config),
        Suite::SingleTest => {
            let outcome = run_single_test(config)?;
            Ok(outcome
                .results
                .iter()
                .map(|r| ResultRow {
                    suite: Suite::SingleTest.name().into(),
                    statistic: r.kind.name().into(),
                    setting: "observed".into(),
                    grid_point: 0.0,
                    replicate: 0,
                    value: r.p_value,
                    rejected: Some(r.p_value <= config.alpha),
                    runtime_seconds: if config.record_runtime {
                        r.diagnostics.fit_seconds + r.diagnostics.eval_seconds
                    } else {
                        0.0
                    },
                })
                .collect())
        }
    }
}
