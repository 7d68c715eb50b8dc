//! Counterfactual CSV files: one header row, `.` decimals, one unit per row.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, PointSet};
use crate::error::{Error, Result};

/// Propensity trimming range applied when a propensity column is present.
pub const DEFAULT_TRIM: (f64, f64) = (0.03, 0.97);

/// Column mapping of a counterfactual CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub treatment: String,
    pub outcomes: Vec<String>,
    pub y0: Option<Vec<String>>,
    pub y1: Option<Vec<String>>,
    /// Column holding the true `e(x, 1)`.
    pub propensity: Option<String>,
    /// Explicit covariate columns; all unassigned columns when `None`.
    pub covariates: Option<Vec<String>>,
    pub exclude: Vec<String>,
    /// Keep rows whose propensity lies in this closed range.
    pub trim: Option<(f64, f64)>,
    /// Pick up `y0`, `y1` and `e` columns (or `y0_j`, `y1_j` for vector
    /// outcomes) when present and not configured explicitly.
    pub auto_detect: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            treatment: "t".into(),
            outcomes: vec!["y".into()],
            y0: None,
            y1: None,
            propensity: None,
            covariates: None,
            exclude: Vec::new(),
            trim: Some(DEFAULT_TRIM),
            auto_detect: true,
        }
    }
}

fn counterfactual_names(outcomes: &[String], prefix: &str) -> Vec<String> {
    if outcomes.len() == 1 {
        vec![prefix.to_string()]
    } else {
        (1..=outcomes.len()).map(|j| format!("{prefix}_{j}")).collect()
    }
}

struct Layout {
    x: Vec<usize>,
    t: usize,
    y: Vec<usize>,
    y0: Option<Vec<usize>>,
    y1: Option<Vec<usize>>,
    e: Option<usize>,
}

impl CsvSchema {
    fn layout(&self, header: &csv::StringRecord, path: &Path) -> Result<Layout> {
        let find = |name: &str| -> Result<usize> {
            header.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
        };
        let find_all = |names: &[String]| names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>();
        let present = |names: &[String]| names.iter().all(|n| header.iter().any(|h| h == n));

        let t = find(&self.treatment)?;
        if self.outcomes.is_empty() {
            return Err(Error::Config("schema names no outcome columns".into()));
        }
        let y = find_all(&self.outcomes)?;
        let resolve_cf = |given: &Option<Vec<String>>, prefix: &str| -> Result<Option<Vec<usize>>> {
            match given {
                Some(names) => {
                    if names.len() != self.outcomes.len() {
                        return Err(Error::Config(format!("{prefix} columns must match the outcome columns")));
                    }
                    find_all(names).map(Some)
                }
                None if self.auto_detect => {
                    let names = counterfactual_names(&self.outcomes, prefix);
                    if present(&names) { find_all(&names).map(Some) } else { Ok(None) }
                }
                None => Ok(None),
            }
        };
        let y0 = resolve_cf(&self.y0, "y0")?;
        let y1 = resolve_cf(&self.y1, "y1")?;
        if y0.is_some() != y1.is_some() {
            return Err(Error::Config("both or neither counterfactual columns must be given".into()));
        }
        let e = match &self.propensity {
            Some(name) => Some(find(name)?),
            None if self.auto_detect => header.iter().position(|h| h == "e"),
            None => None,
        };
        let x = match &self.covariates {
            Some(names) => find_all(names)?,
            None => {
                let mut taken: HashSet<usize> = y.iter().copied().collect();
                taken.insert(t);
                taken.extend(y0.iter().flatten());
                taken.extend(y1.iter().flatten());
                taken.extend(e);
                for name in &self.exclude {
                    taken.insert(find(name)?);
                }
                (0..header.len()).filter(|i| !taken.contains(i)).collect()
            }
        };
        Ok(Layout { x, t, y, y0, y1, e })
    }
}

/// Reads a counterfactual CSV according to `schema`. Non-numeric or
/// non-finite cells and treatments outside `{0, 1}` are errors naming the
/// data row (1-based, header excluded). With a propensity column and a trim
/// range, rows outside the range are dropped.
pub fn load_counterfactual_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    read_counterfactual_csv(file, path, schema)
}

pub(crate) fn read_counterfactual_csv<R: Read>(reader: R, path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let layout = schema.layout(&header, path)?;
    let mut x = Vec::new();
    let mut t = Vec::new();
    let mut y = Vec::new();
    let mut y0 = Vec::new();
    let mut y1 = Vec::new();
    let mut e = Vec::new();
    let csv_err = |row: usize, message: String| Error::Csv {
        path: PathBuf::from(path),
        row,
        message,
    };
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|err| csv_err(row, err.to_string()))?;
        let cell = |i: usize| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("");
            let v: f64 = raw
                .parse()
                .map_err(|_| csv_err(row, format!("column `{}`: cannot parse `{raw}` as a number", &header[i])))?;
            if !v.is_finite() {
                return Err(csv_err(row, format!("column `{}`: non-finite value `{raw}`", &header[i])));
            }
            Ok(v)
        };
        for &i in &layout.x {
            x.push(cell(i)?);
        }
        let tv = cell(layout.t)?;
        t.push(match tv {
            0.0 => Arm::Control,
            1.0 => Arm::Treated,
            v => return Err(csv_err(row, format!("treatment value {v} outside {{0, 1}}"))),
        });
        for &i in &layout.y {
            y.push(cell(i)?);
        }
        for (cols, out) in [(&layout.y0, &mut y0), (&layout.y1, &mut y1)] {
            for &i in cols.iter().flatten() {
                out.push(cell(i)?);
            }
        }
        if let Some(i) = layout.e {
            e.push(cell(i)?);
        }
    }
    let n = t.len();
    if n == 0 {
        return Err(csv_err(0, "no data rows".into()));
    }
    let p = layout.y.len();
    let x = if layout.x.is_empty() {
        PointSet::empty_dims(n)
    } else {
        PointSet::new(layout.x.len(), x)?
    };
    let mut ds = Dataset::new(x, t, PointSet::new(p, y)?)?;
    if layout.y0.is_some() {
        ds = ds.with_counterfactuals(PointSet::new(p, y0)?, PointSet::new(p, y1)?)?;
    }
    if layout.e.is_some() {
        ds.true_e = Some(e);
        if let Some((lo, hi)) = schema.trim {
            let keep: Vec<usize> = (0..n)
                .filter(|&i| {
                    let v = ds.true_e.as_ref().unwrap()[i];
                    v >= lo && v <= hi
                })
                .collect();
            if keep.is_empty() {
                return Err(csv_err(0, format!("trimming to [{lo}, {hi}] removed every row")));
            }
            if keep.len() < n {
                ds = ds.subset(&keep);
            }
        }
    }
    Ok(ds)
}

/// Writes `ds` with columns `x0..`, `t`, the outcome column(s) and, when
/// present, counterfactual and propensity columns. Loading the file with
/// the default schema (and no trimming) reproduces `ds` exactly.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to_writer(ds, file)
}

/// [`write_csv`] to any writer.
pub fn write_csv_to_writer<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let p = ds.y.dim();
    let outcomes = counterfactual_names(&vec![String::new(); p], "y");
    let mut header: Vec<String> = (0..ds.x.dim()).map(|j| format!("x{j}")).collect();
    header.push("t".into());
    header.extend(outcomes.iter().cloned());
    let has_cf = ds.y0.is_some() && ds.y1.is_some();
    if has_cf {
        header.extend(counterfactual_names(&outcomes, "y0"));
        header.extend(counterfactual_names(&outcomes, "y1"));
    }
    if ds.true_e.is_some() {
        header.push("e".into());
    }
    w.write_record(&header)?;
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        rec.clear();
        if ds.x.dim() > 0 {
            rec.extend(ds.x.point(i).iter().map(f64::to_string));
        }
        rec.push(if ds.t[i] == Arm::Treated { "1".into() } else { "0".into() });
        rec.extend(ds.y.point(i).iter().map(f64::to_string));
        if has_cf {
            for cf in [ds.y0.as_ref().unwrap(), ds.y1.as_ref().unwrap()] {
                rec.extend(cf.point(i).iter().map(f64::to_string));
            }
        }
        if let Some(e) = &ds.true_e {
            rec.push(e[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
