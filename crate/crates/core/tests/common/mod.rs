#![allow(dead_code)]

use dr_cme::cme::{fit_cme, CmeModel, Regularizer};
use dr_cme::kernels::KernelSpec;
use dr_cme::{Arm, Dataset, PointSet};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Coefficients over concrete outcome points.
pub type Atoms = Vec<(Vec<f64>, f64)>;

pub fn gauss(h: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
    (-d2 / (2.0 * h * h)).exp()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Labels with at least two samples per arm.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Arm> {
    let mut t: Vec<Arm> = (0..n)
        .map(|_| if rng.random::<bool>() { Arm::Treated } else { Arm::Control })
        .collect();
    t[0] = Arm::Treated;
    t[1] = Arm::Treated;
    t[2] = Arm::Control;
    t[3] = Arm::Control;
    t
}

pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dx: usize, dy: usize) -> Dataset {
    let t = random_labels(rng, n);
    let mut x = Vec::with_capacity(n * dx);
    let mut y = Vec::with_capacity(n * dy);
    for ti in &t {
        let row: Vec<f64> = (0..dx).map(|_| normal(rng)).collect();
        for k in 0..dy {
            y.push(row[k % dx] + 0.7 * ti.as_f64() + 0.5 * normal(rng));
        }
        x.extend(row);
    }
    Dataset::new(PointSet::new(dx, x).unwrap(), t, PointSet::new(dy, y).unwrap()).unwrap()
}

/// A random train/test pair with fixed kernels, ridge and test propensities.
pub struct Instance {
    pub train: Dataset,
    pub test: Dataset,
    pub e: Vec<f64>,
    pub hx: f64,
    pub hy: f64,
    pub lambda: f64,
}

impl Instance {
    pub fn random(seed: u64, n: usize) -> Self {
        let mut r = rng(seed);
        let dy = 1 + (seed % 2) as usize;
        let train = random_dataset(&mut r, n, 2, dy);
        let test = random_dataset(&mut r, n, 2, dy);
        let e = (0..n).map(|_| r.random_range(0.1..0.9)).collect();
        Self {
            train,
            test,
            e,
            hx: r.random_range(0.5..2.0),
            hy: r.random_range(0.5..2.0),
            lambda: r.random_range(0.05..1.0),
        }
    }

    pub fn covariate_kernel(&self) -> KernelSpec {
        KernelSpec::gaussian(self.hx).unwrap()
    }

    pub fn outcome_kernel(&self) -> KernelSpec {
        KernelSpec::gaussian(self.hy).unwrap()
    }

    pub fn cme(&self, arm: Arm) -> CmeModel {
        fit_cme(&self.train, arm, self.covariate_kernel(), Regularizer::Fixed(self.lambda)).unwrap()
    }

    pub fn e_arm(&self, i: usize, arm: Arm) -> f64 {
        match arm {
            Arm::Treated => self.e[i],
            Arm::Control => 1.0 - self.e[i],
        }
    }

    /// `r(x, t)` by solving `(K_t + lambda I) v = k_t(x)` with LU.
    pub fn naive_cme(&self, arm: Arm, x: &[f64]) -> Atoms {
        let idx: Vec<usize> = (0..self.train.n()).filter(|&i| self.train.t[i] == arm).collect();
        let n = idx.len();
        let k = DMatrix::from_fn(n, n, |a, b| {
            gauss(self.hx, self.train.x.point(idx[a]), self.train.x.point(idx[b])) + if a == b { self.lambda } else { 0.0 }
        });
        let kx = DVector::from_fn(n, |a, _| gauss(self.hx, self.train.x.point(idx[a]), x));
        let v = k.lu().solve(&kx).unwrap();
        idx.iter()
            .zip(v.iter())
            .map(|(&j, &c)| (self.train.y.point(j).to_vec(), c))
            .collect()
    }

    /// `(1/m) sum_i [1{t_i=t}(l(y_i) - r(x_i,t))/e(x_i,t) + r(x_i,t)]`.
    pub fn naive_dr(&self, arm: Arm) -> Atoms {
        let m = self.test.n() as f64;
        let mut out = Atoms::new();
        for i in 0..self.test.n() {
            let ind = if self.test.t[i] == arm { 1.0 } else { 0.0 };
            let e = self.e_arm(i, arm);
            out.push((self.test.y.point(i).to_vec(), ind / (e * m)));
            for (y, c) in self.naive_cme(arm, self.test.x.point(i)) {
                out.push((y, c * (1.0 - ind / e) / m));
            }
        }
        out
    }

    /// `(1/n_t') sum_i [1{t_i=t} w_i (l(y_i) - r(x_i,t)) + 1{t_i=t'} r(x_i,t)]`.
    pub fn naive_dr_ett(&self, t: Arm, t_prime: Arm) -> Atoms {
        let n_pop = self.test.t.iter().filter(|&&a| a == t_prime).count() as f64;
        let mut out = Atoms::new();
        for i in 0..self.test.n() {
            let r = self.naive_cme(t, self.test.x.point(i));
            if self.test.t[i] == t {
                let w = self.e_arm(i, t_prime) / self.e_arm(i, t);
                out.push((self.test.y.point(i).to_vec(), w / n_pop));
                for (y, c) in r {
                    out.push((y, -w * c / n_pop));
                }
            } else {
                for (y, c) in r {
                    out.push((y, c / n_pop));
                }
            }
        }
        out
    }

    pub fn naive_dett_cme(&self, t: Arm, t_prime: Arm) -> Atoms {
        let n_pop = self.test.t.iter().filter(|&&a| a == t_prime).count() as f64;
        let mut out = Atoms::new();
        for i in 0..self.test.n() {
            if self.test.t[i] == t_prime {
                for (y, c) in self.naive_cme(t, self.test.x.point(i)) {
                    out.push((y, c / n_pop));
                }
            }
        }
        out
    }

    pub fn naive_empirical(&self, arm: Arm) -> Atoms {
        let n = self.test.t.iter().filter(|&&a| a == arm).count() as f64;
        (0..self.test.n())
            .filter(|&i| self.test.t[i] == arm)
            .map(|i| (self.test.y.point(i).to_vec(), 1.0 / n))
            .collect()
    }
}

pub fn minus(a: &Atoms, b: &Atoms) -> Atoms {
    a.iter().cloned().chain(b.iter().map(|(y, c)| (y.clone(), -c))).collect()
}

/// `sum_a sum_b c_a c_b l(y_a, y_b)` without merging duplicates.
pub fn naive_norm_squared(atoms: &Atoms, h: f64) -> f64 {
    let mut s = 0.0;
    for (ya, ca) in atoms {
        for (yb, cb) in atoms {
            s += ca * cb * gauss(h, ya, yb);
        }
    }
    s
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
