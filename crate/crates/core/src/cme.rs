//! Per-arm conditional mean embeddings fitted by kernel ridge regression.
//!
//! The embedding of `Y | X = x, T = t` is `sum_j v_j l(y_j, .)` over the arm's
//! training outcomes, with `v = (K_t + lambda I)^{-1} k_t(x)`. `lambda` is the
//! absolute ridge added to the Gram matrix; a per-sample regulariser `gamma`
//! on the empirical risk corresponds to `lambda = n_t * gamma`.

use crate::data::{Arm, Dataset, PointSet};
use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};
use crate::{Matrix, Vector};

/// How the ridge parameter is chosen.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `lambda = mean(diag K_t) / sqrt(n_t)`.
    Default,
    Fixed(f64),
}

impl Regularizer {
    pub fn resolve(&self, gram: &Matrix) -> f64 {
        match *self {
            Regularizer::Fixed(l) => l,
            Regularizer::Default => {
                let n = gram.nrows().max(1) as f64;
                let mean_diag = gram.trace() / n;
                mean_diag.max(f64::MIN_POSITIVE) / n.sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmeModel {
    pub arm: Arm,
    /// Indices into the training dataset of the samples with `T = arm`.
    pub train_indices: Vec<usize>,
    /// `(K_t + lambda I)^{-1}`.
    pub weight_matrix: Matrix,
    pub lambda: f64,
    pub covariate_kernel: KernelSpec,
    /// Covariates of the arm's training samples.
    pub train_points: PointSet,
}

/// Fits the arm-`arm` embedding on `train`.
pub fn fit_cme(
    train: &Dataset,
    arm: Arm,
    covariate_kernel: KernelSpec,
    lambda: Regularizer,
) -> Result<CmeModel> {
    let indices = train.arm_indices(arm);
    if indices.len() < 2 {
        return Err(Error::InsufficientArm {
            arm,
            found: indices.len(),
            required: 2,
        });
    }
    let points = train.x.select(&indices);
    let gram = kernels::self_gram(&covariate_kernel, &points);
    CmeModel::from_gram(arm, indices, points, &gram, covariate_kernel, lambda)
}

impl CmeModel {
    /// Builds the model from a precomputed arm Gram matrix.
    pub fn from_gram(
        arm: Arm,
        train_indices: Vec<usize>,
        train_points: PointSet,
        gram: &Matrix,
        covariate_kernel: KernelSpec,
        lambda: Regularizer,
    ) -> Result<Self> {
        let n = train_indices.len();
        if gram.nrows() != n || gram.ncols() != n || train_points.len() != n {
            return Err(Error::invalid("gram shape does not match arm sample count"));
        }
        let lambda = lambda.resolve(gram);
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        let mut system = gram.clone();
        for i in 0..n {
            system[(i, i)] += lambda;
        }
        let chol = system.cholesky().ok_or(Error::Factorization {
            context: "conditional mean embedding",
            lambda,
        })?;
        let mut w = chol.inverse();
        // Symmetrise away rounding in the triangular solves.
        let wt = w.transpose();
        w += wt;
        w *= 0.5;
        Ok(Self {
            arm,
            train_indices,
            weight_matrix: w,
            lambda,
            covariate_kernel,
            train_points,
        })
    }

    /// The `lambda -> infinity` limit: every query gets zero weights.
    pub fn zero(arm: Arm, train_indices: Vec<usize>, train_points: PointSet, covariate_kernel: KernelSpec) -> Self {
        let n = train_indices.len();
        Self {
            arm,
            train_indices,
            weight_matrix: Matrix::zeros(n, n),
            lambda: f64::INFINITY,
            covariate_kernel,
            train_points,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.lambda.is_infinite()
    }

    pub fn n_train(&self) -> usize {
        self.train_indices.len()
    }

    /// `k_t(x)`: kernel between `x` and every arm training point.
    pub fn kernel_vector(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.train_points.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.train_points.dim(),
                found: x.len(),
            });
        }
        Ok(Vector::from_iterator(
            self.n_train(),
            self.train_points
                .iter()
                .map(|p| self.covariate_kernel.eval_unchecked(p, x)),
        ))
    }

    /// Embedding weights `W_t k_t(x)` over the arm's training outcomes.
    pub fn weights(&self, x: &[f64]) -> Result<Vector> {
        Ok(&self.weight_matrix * self.kernel_vector(x)?)
    }

    /// Weights for many queries at once: column `i` is `W_t k_t(points[i])`.
    pub fn weights_batch(&self, points: &PointSet) -> Result<Matrix> {
        if points.dim() != self.train_points.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.train_points.dim(),
                found: points.dim(),
            });
        }
        let k = kernels::cross_gram(&self.covariate_kernel, &self.train_points, points);
        Ok(self.weights_from_kernel(&k))
    }

    /// `W_t K` for a precomputed kernel block with rows over the arm's
    /// training points.
    pub fn weights_from_kernel(&self, k: &Matrix) -> Matrix {
        &self.weight_matrix * k
    }

    /// `max |(K_t + lambda I) W_t - I|`.
    pub fn inverse_residual(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let mut system = kernels::self_gram(&self.covariate_kernel, &self.train_points);
        for i in 0..self.n_train() {
            system[(i, i)] += self.lambda;
        }
        let prod = system * &self.weight_matrix;
        let n = self.n_train();
        (prod - Matrix::identity(n, n)).amax()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dataset(xs: &[f64], arms: &[Arm]) -> Dataset {
        let x = PointSet::from_scalars(xs);
        let y = PointSet::from_scalars(&vec![0.0; xs.len()]);
        Dataset::new(x, arms.to_vec(), y).unwrap()
    }

    fn gauss() -> KernelSpec {
        KernelSpec::gaussian(1.0).unwrap()
    }

    #[test]
    fn scalar_inverse() {
        let points = PointSet::from_scalars(&[0.3]);
        let k = Matrix::from_element(1, 1, 1.0);
        let m = CmeModel::from_gram(Arm::Treated, vec![0], points, &k, gauss(), Regularizer::Fixed(1.0)).unwrap();
        assert_relative_eq!(m.weight_matrix[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(m.weights(&[0.3]).unwrap()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn needs_two_arm_samples() {
        let ds = dataset(&[0.0, 1.0, 2.0], &[Arm::Treated, Arm::Control, Arm::Control]);
        assert!(matches!(
            fit_cme(&ds, Arm::Treated, gauss(), Regularizer::Default),
            Err(Error::InsufficientArm { found: 1, .. })
        ));
        assert!(fit_cme(&ds, Arm::Control, gauss(), Regularizer::Default).is_ok());
    }

    #[test]
    fn factorization_failure_reported() {
        // Linear kernel on duplicated points is singular; a negative-definite
        // shift cannot be factorised.
        let points = PointSet::from_scalars(&[1.0, 1.0]);
        let k = Matrix::from_element(2, 2, 1.0);
        let r = CmeModel::from_gram(Arm::Control, vec![0, 1], points, &(k * -3.0), KernelSpec::linear(), Regularizer::Fixed(1.0));
        assert!(matches!(r, Err(Error::Factorization { .. })));
    }

    #[test]
    fn residual_and_linear_system() {
        let xs = [-1.2, -0.4, 0.1, 0.9, 1.7, 2.2];
        let arms = [Arm::Control; 6];
        let m = fit_cme(&dataset(&xs, &arms), Arm::Control, gauss(), Regularizer::Fixed(0.05)).unwrap();
        assert!(m.inverse_residual() <= 1e-8);
        let x = [0.33];
        let v = m.weights(&x).unwrap();
        let mut sys = kernels::self_gram(&m.covariate_kernel, &m.train_points);
        for i in 0..6 {
            sys[(i, i)] += m.lambda;
        }
        let r = sys * &v - m.kernel_vector(&x).unwrap();
        assert!(r.amax() <= 1e-10);
        assert_eq!(m.weight_matrix, m.weight_matrix.transpose());
    }

    #[test]
    fn large_lambda_shrinks_to_zero() {
        let xs = [0.0, 1.0, 2.0];
        let m = fit_cme(&dataset(&xs, &[Arm::Treated; 3]), Arm::Treated, gauss(), Regularizer::Fixed(1e9)).unwrap();
        let x = [0.5];
        let kn = m.kernel_vector(&x).unwrap().norm();
        assert!(m.weights(&x).unwrap().amax() <= kn / 1e9);
    }

    #[test]
    fn interpolation_limit() {
        // Oracle: with lambda ~ 0 and well-separated points, W k(x_j) solves
        // K v = K e_j, i.e. v = e_j.
        let xs = [0.0, 10.0, 20.0, 30.0, 40.0];
        let m = fit_cme(&dataset(&xs, &[Arm::Treated; 5]), Arm::Treated, gauss(), Regularizer::Fixed(1e-10)).unwrap();
        for (j, &x) in xs.iter().enumerate() {
            let v = m.weights(&[x]).unwrap();
            for i in 0..5 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((v[i] - target).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn constant_kernel_gives_equal_weights() {
        // A Gaussian with enormous bandwidth is numerically constant.
        let kernel = KernelSpec::gaussian(1e12).unwrap();
        let xs = [0.0, 1.0, 2.0, 3.0];
        let m = fit_cme(&dataset(&xs, &[Arm::Treated; 4]), Arm::Treated, kernel, Regularizer::Fixed(0.5)).unwrap();
        let v = m.weights(&[7.0]).unwrap();
        for i in 1..4 {
            assert_relative_eq!(v[i], v[0], max_relative = 1e-12);
        }
        // 1/(n + lambda) for the all-ones Gram.
        assert_relative_eq!(v[0], 1.0 / 4.5, max_relative = 1e-10);
    }

    #[test]
    fn weights_depend_only_on_kernel_vector() {
        // Points symmetric about a training configuration symmetric about 0.
        let xs = [-1.0, 1.0];
        let m = fit_cme(&dataset(&xs, &[Arm::Treated; 2]), Arm::Treated, gauss(), Regularizer::Fixed(0.1)).unwrap();
        let a = m.weights(&[0.0]).unwrap();
        let b = m.weights(&[-0.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_matches_single() {
        let xs = [0.1, 0.7, 1.9, 2.4];
        let m = fit_cme(&dataset(&xs, &[Arm::Treated; 4]), Arm::Treated, gauss(), Regularizer::Default).unwrap();
        let q = PointSet::from_scalars(&[0.0, 1.0, 3.0]);
        let batch = m.weights_batch(&q).unwrap();
        for (i, p) in q.iter().enumerate() {
            let single = m.weights(p).unwrap();
            assert!((batch.column(i) - single).amax() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn shrinkage_is_monotone(xs in prop::collection::vec(-3.0f64..3.0, 2..12),
                                 q in -3.0f64..3.0, l1 in 1e-3f64..10.0, factor in 1.0f64..100.0) {
            let arms = vec![Arm::Treated; xs.len()];
            let ds = dataset(&xs, &arms);
            let m1 = fit_cme(&ds, Arm::Treated, gauss(), Regularizer::Fixed(l1)).unwrap();
            let m2 = fit_cme(&ds, Arm::Treated, gauss(), Regularizer::Fixed(l1 * factor)).unwrap();
            let n1 = m1.weights(&[q]).unwrap().norm();
            let n2 = m2.weights(&[q]).unwrap().norm();
            prop_assert!(n2 <= n1 * (1.0 + 1e-9) + 1e-12);
        }
    }
}
