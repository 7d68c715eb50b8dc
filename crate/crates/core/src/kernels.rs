//! Kernels on covariate and outcome spaces, Gram matrices and the median
//! heuristic bandwidth.
//!
//! Gaussian kernels use `k(x, y) = exp(-|x - y|^2 / (2 h^2))`. Other
//! characteristic kernels (Matérn, Laplace) would slot in as further
//! [`KernelFamily`] variants; nothing downstream depends on the family.

use serde::{Deserialize, Serialize};

use crate::data::PointSet;
use crate::error::{Error, Result};
use crate::{par, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Linear,
}

/// A kernel family plus its bandwidth (ignored for the linear kernel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::invalid(format!(
                "gaussian bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Self {
            family: KernelFamily::Gaussian,
            bandwidth,
        })
    }

    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            bandwidth: 1.0,
        }
    }

    /// Gaussian kernel with the median-heuristic bandwidth of `points`.
    pub fn gaussian_median(points: &PointSet) -> Result<Self> {
        Self::gaussian(median_heuristic(points)?)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Evaluates the kernel; panics-free but unchecked on dimensions.
    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
            KernelFamily::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        Ok(self.eval_unchecked(x, y))
    }

    /// Stable identifier of the kernel, used to assert that every permuted
    /// statistic of one test shares the same kernel.
    pub fn fingerprint(&self) -> u64 {
        let tag = match self.family {
            KernelFamily::Gaussian => 0x6761_7573_7300_0000u64,
            KernelFamily::Linear => 0x6c69_6e65_6172_0000u64,
        };
        tag ^ self.bandwidth.to_bits().rotate_left(17)
    }
}

/// `k(x, y)` under `spec`.
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.eval(x, y)
}

/// Kernel matrix between two point sets, with row/column provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Matrix,
}

/// Gram matrix `values[i][j] = k(a[i], b[j])`.
pub fn gram(spec: &KernelSpec, a: &PointSet, b: &PointSet) -> Result<GramMatrix> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("gram matrix of an empty point set"));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(GramMatrix {
        rows: (0..a.len()).collect(),
        cols: (0..b.len()).collect(),
        values: cross_gram(spec, a, b),
    })
}

/// Dense kernel matrix between `a` and `b`, parallel over columns.
/// Callers guarantee equal dimensions.
pub fn cross_gram(spec: &KernelSpec, a: &PointSet, b: &PointSet) -> Matrix {
    let na = a.len();
    let cols: Vec<Vec<f64>> = par::map_range(b.len(), |j| {
        let yj = b.point(j);
        (0..na).map(|i| spec.eval_unchecked(a.point(i), yj)).collect()
    });
    Matrix::from_iterator(na, b.len(), cols.into_iter().flatten())
}

/// Symmetric kernel matrix of `a` with itself; only the lower triangle is
/// evaluated, so the result is exactly symmetric.
pub fn self_gram(spec: &KernelSpec, a: &PointSet) -> Matrix {
    let n = a.len();
    let cols: Vec<Vec<f64>> = par::map_range(n, |j| {
        let yj = a.point(j);
        (j..n).map(|i| spec.eval_unchecked(a.point(i), yj)).collect()
    });
    let mut m = Matrix::zeros(n, n);
    for (j, col) in cols.into_iter().enumerate() {
        for (off, v) in col.into_iter().enumerate() {
            let i = j + off;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Median of pairwise Euclidean distances over distinct pairs, ignoring
/// zero distances.
pub fn median_heuristic(points: &PointSet) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid("median heuristic needs at least two points"));
    }
    let rows: Vec<Vec<f64>> = par::map_range(n, |i| {
        let xi = points.point(i);
        (i + 1..n)
            .map(|j| {
                xi.iter()
                    .zip(points.point(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .filter(|&d2| d2 > 0.0)
            .collect()
    });
    let mut d2: Vec<f64> = rows.into_iter().flatten().collect();
    if d2.is_empty() {
        return Err(Error::DegenerateBandwidth);
    }
    let m = d2.len();
    let mid = m / 2;
    let (_, upper, _) = d2.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    // Even counts average the two central order statistics.
    if m % 2 == 1 {
        Ok(upper.sqrt())
    } else {
        let lower = d2[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(0.5 * (lower.sqrt() + upper.sqrt()))
    }
}
