//! Core data containers: point sets, treatment arms and datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary treatment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treated];

    pub fn from_u8(v: u8) -> Option<Arm> {
        match v {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treated),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.index() as f64
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Control => Arm::Treated,
            Arm::Treated => Arm::Control,
        }
    }
}

/// A set of points of common dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            if !data.is_empty() {
                return Err(Error::invalid("zero-dimensional point set with data"));
            }
        } else if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    /// `n` points of dimension zero (e.g. an intercept-only design).
    pub fn empty_dims(n: usize) -> Self {
        // Zero-dimensional sets track their length through a sentinel buffer.
        Self {
            dim: 0,
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Ok(Self::empty_dims(rows.len()));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { dim, data })
    }

    /// Column of scalars as one-dimensional points.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self {
            dim: 1,
            data: values.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(self.data.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        if self.dim == 0 {
            return &[];
        }
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, indices: &[usize]) -> PointSet {
        if self.dim == 0 {
            return Self::empty_dims(indices.len());
        }
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        Self {
            dim: self.dim,
            data,
        }
    }

    /// Concatenates two point sets of equal dimension.
    pub fn concat(&self, other: &PointSet) -> Result<PointSet> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            dim: self.dim,
            data,
        })
    }

    /// Appends a constant coordinate to every point.
    pub fn with_constant_column(&self, value: f64) -> PointSet {
        let dim = self.dim + 1;
        let mut data = Vec::with_capacity(self.len() * dim);
        for p in self.iter() {
            data.extend_from_slice(p);
            data.push(value);
        }
        Self { dim, data }
    }

    pub fn scaled(&self, c: f64) -> PointSet {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter().map(|p| p[j]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.dim == 0 || self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-coordinate affine standardisation (mean 0, variance 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Fits on `points`. Coordinates with zero variance keep scale 1.
    pub fn fit(points: &PointSet) -> Self {
        let d = points.dim();
        let n = points.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for p in points.iter() {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for p in points.iter() {
            for ((s, v), m) in var.iter_mut().zip(p).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn transform_point(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .map(|((v, m), s)| (v - m) / s),
        );
    }

    pub fn transform(&self, points: &PointSet) -> PointSet {
        if points.dim() == 0 {
            return points.clone();
        }
        let mut data = Vec::with_capacity(points.as_slice().len());
        let mut buf = Vec::with_capacity(points.dim());
        for p in points.iter() {
            self.transform_point(p, &mut buf);
            data.extend_from_slice(&buf);
        }
        PointSet {
            dim: points.dim(),
            data,
        }
    }
}

/// Observational dataset with optional counterfactual ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: PointSet,
    pub t: Vec<Arm>,
    pub y: PointSet,
    pub y0: Option<PointSet>,
    pub y1: Option<PointSet>,
    pub true_e: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: PointSet, t: Vec<Arm>, y: PointSet) -> Result<Self> {
        let ds = Self {
            x,
            t,
            y,
            y0: None,
            y1: None,
            true_e: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_counterfactuals(mut self, y0: PointSet, y1: PointSet) -> Result<Self> {
        self.y0 = Some(y0);
        self.y1 = Some(y1);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        for (name, len) in [("covariates", self.x.len()), ("outcomes", self.y.len())] {
            if len != n {
                return Err(Error::invalid(format!(
                    "{name} have {len} rows but treatment has {n}"
                )));
            }
        }
        for cf in [&self.y0, &self.y1].into_iter().flatten() {
            if cf.len() != n || cf.dim() != self.y.dim() {
                return Err(Error::invalid("counterfactual shape differs from outcomes"));
            }
        }
        if let Some(e) = &self.true_e {
            if e.len() != n {
                return Err(Error::invalid("true propensity length differs from n"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.t.iter().filter(|&&a| a == arm).count()
    }

    pub fn arm_indices(&self, arm: Arm) -> Vec<usize> {
        arm_indices(&self.t, arm)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(indices),
            t: indices.iter().map(|&i| self.t[i]).collect(),
            y: self.y.select(indices),
            y0: self.y0.as_ref().map(|p| p.select(indices)),
            y1: self.y1.as_ref().map(|p| p.select(indices)),
            true_e: self
                .true_e
                .as_ref()
                .map(|e| indices.iter().map(|&i| e[i]).collect()),
        }
    }

    /// Same data with a different treatment vector; counterfactual-consistent
    /// outcomes are not recomputed.
    pub fn with_treatments(&self, t: Vec<Arm>) -> Result<Dataset> {
        if t.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                found: t.len(),
            });
        }
        Ok(Dataset { t, ..self.clone() })
    }

    /// Consistency check `Y = Y(T)` when counterfactuals are present.
    pub fn is_consistent(&self) -> bool {
        match (&self.y0, &self.y1) {
            (Some(y0), Some(y1)) => self.t.iter().enumerate().all(|(i, a)| {
                let cf = if *a == Arm::Treated { y1 } else { y0 };
                cf.point(i) == self.y.point(i)
            }),
            _ => true,
        }
    }
}

pub fn arm_indices(t: &[Arm], arm: Arm) -> Vec<usize> {
    t.iter()
        .enumerate()
        .filter(|(_, &a)| a == arm)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_set_shapes() {
        let p = PointSet::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.point(1), &[3.0, 4.0]);
        assert_eq!(p.select(&[1]).point(0), &[3.0, 4.0]);
        assert!(PointSet::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let z = PointSet::empty_dims(5);
        assert_eq!(z.len(), 5);
        assert_eq!(z.point(3), &[] as &[f64]);
    }

    #[test]
    fn standardizer_centres_and_scales() {
        let p = PointSet::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&p);
        let q = s.transform(&p);
        assert_eq!(q.point(0), &[-1.0, 0.0]);
        assert_eq!(q.point(1), &[1.0, 0.0]);
    }

    #[test]
    fn dataset_rejects_ragged_inputs() {
        let x = PointSet::from_scalars(&[1.0, 2.0]);
        let y = PointSet::from_scalars(&[1.0]);
        assert!(Dataset::new(x, vec![Arm::Control, Arm::Treated], y).is_err());
    }
}
