//! Result tables: one CSV of raw rows per suite plus a summary CSV.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Column order of every results CSV.
pub const RESULT_COLUMNS: [&str; 8] = [
    "suite",
    "statistic",
    "setting",
    "grid_point",
    "replicate",
    "value",
    "rejected",
    "runtime_seconds",
];

/// Column order of every summary CSV.
pub const SUMMARY_COLUMNS: [&str; 10] = [
    "suite",
    "statistic",
    "setting",
    "grid_point",
    "replicates",
    "mean",
    "median",
    "std_error",
    "rejection_rate",
    "rejection_std_error",
];

/// One replicate of one statistic at one grid point. `value` is an
/// embedding error or a p-value depending on the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub suite: String,
    pub statistic: String,
    pub setting: String,
    pub grid_point: f64,
    pub replicate: usize,
    pub value: f64,
    pub rejected: Option<bool>,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub suite: String,
    pub statistic: String,
    pub setting: String,
    pub grid_point: f64,
    pub replicates: usize,
    pub mean: f64,
    pub median: f64,
    pub std_error: f64,
    pub rejection_rate: Option<f64>,
    pub rejection_std_error: Option<f64>,
}

pub(crate) fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (&a.suite, &a.statistic, &a.setting)
            .cmp(&(&b.suite, &b.statistic, &b.setting))
            .then(a.grid_point.total_cmp(&b.grid_point))
            .then(a.replicate.cmp(&b.replicate))
    });
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Per (suite, statistic, setting, grid point): mean, median and standard
/// error of `value`, and the rejection rate with its binomial standard
/// error when rows carry rejection flags.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut out = Vec::new();
    let mut start = 0;
    while start < sorted.len() {
        let head = &sorted[start];
        let end = start
            + sorted[start..]
                .iter()
                .take_while(|r| {
                    r.suite == head.suite
                        && r.statistic == head.statistic
                        && r.setting == head.setting
                        && r.grid_point.to_bits() == head.grid_point.to_bits()
                })
                .count();
        let group = &sorted[start..end];
        let k = group.len();
        let mut values: Vec<f64> = group.iter().map(|r| r.value).collect();
        let mean = values.iter().sum::<f64>() / k as f64;
        let std_error = if k > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        } else {
            0.0
        };
        let flags: Vec<bool> = group.iter().filter_map(|r| r.rejected).collect();
        let (rejection_rate, rejection_std_error) = if flags.len() == k {
            let rate = flags.iter().filter(|&&f| f).count() as f64 / k as f64;
            (Some(rate), Some((rate * (1.0 - rate) / k as f64).sqrt()))
        } else {
            (None, None)
        };
        out.push(SummaryRow {
            suite: head.suite.clone(),
            statistic: head.statistic.clone(),
            setting: head.setting.clone(),
            grid_point: head.grid_point,
            replicates: k,
            mean,
            median: median(&mut values),
            std_error,
            rejection_rate,
            rejection_std_error,
        });
        start = end;
    }
    out
}

fn write_rows<T: Serialize>(rows: &[T], columns: &[&str], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(columns)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

pub fn write_results(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(rows, &RESULT_COLUMNS, path.as_ref())
}

pub fn write_summary(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(rows, &SUMMARY_COLUMNS, path.as_ref())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    read_rows(path.as_ref())
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    read_rows(path.as_ref())
}

/// Writes `<dir>/<name>.csv` and `<dir>/<name>_summary.csv`.
pub fn write_suite_outputs(rows: &[ResultRow], dir: impl AsRef<Path>, name: &str) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let results = dir.join(format!("{name}.csv"));
    let summary = dir.join(format!("{name}_summary.csv"));
    write_results(rows, &results)?;
    write_summary(&summarize(rows), &summary)?;
    Ok((results, summary))
}
