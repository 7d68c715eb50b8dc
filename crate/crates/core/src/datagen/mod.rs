//! Synthetic data-generating processes with counterfactual ground truth and
//! counterfactual CSV ingestion.

mod io;

use std::sync::Mutex;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, PointSet};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, substream, StreamRng};

pub use io::{load_counterfactual_csv, write_csv, write_csv_to_writer, CsvSchema, DEFAULT_TRIM};

/// Range the confounded propensity is clamped to.
pub const DGP_A_CLAMP: (f64, f64) = (0.005, 0.995);
/// Monte Carlo draws behind the confounded-propensity centring constant.
pub const CENTERING_DRAWS: usize = 1_000_000;
const CENTERING_SEED: u64 = 0x00C0_FFEE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpFamily {
    /// Confounded linear outcome with a squared-sigmoid propensity.
    DgpAConfounded,
    /// Randomised treatment that also shifts the covariate scale.
    DgpBRandomized,
    /// Confounded outcome with a multiplicative, possibly mean-zero effect.
    DgpEffect,
}

impl DgpFamily {
    pub fn parse(s: &str) -> Option<DgpFamily> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "a" | "dgp_a" | "dgp_a_confounded" | "confounded" => Some(DgpFamily::DgpAConfounded),
            "b" | "dgp_b" | "dgp_b_randomized" | "randomized" => Some(DgpFamily::DgpBRandomized),
            "effect" | "dgp_effect" => Some(DgpFamily::DgpEffect),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DgpFamily::DgpAConfounded => "dgp_a_confounded",
            DgpFamily::DgpBRandomized => "dgp_b_randomized",
            DgpFamily::DgpEffect => "dgp_effect",
        }
    }
}

/// Distribution of the effect multiplier `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZMode {
    One,
    Bernoulli,
    Uniform,
}

impl ZMode {
    pub fn parse(s: &str) -> Option<ZMode> {
        match s.to_ascii_lowercase().as_str() {
            "one" | "1" => Some(ZMode::One),
            "bernoulli" | "ber" => Some(ZMode::Bernoulli),
            "uniform" | "unif" => Some(ZMode::Uniform),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ZMode::One => "one",
            ZMode::Bernoulli => "bernoulli",
            ZMode::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: f64,
    pub beta: f64,
    pub alpha: f64,
    pub sigma_prime: f64,
    pub z_mode: ZMode,
    /// `P(T = 1)` of the randomised design.
    pub treat_prob: f64,
    /// Covariate dimension of the randomised design.
    pub dim_b: usize,
}

impl Default for DgpParams {
    fn default() -> Self {
        Self {
            a: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.1, 0.2, 0.3, 0.4],
            b: vec![0.5, 0.4, 0.3, 0.2, 0.1, 0.4, 0.3, 0.2, 0.1],
            sigma: 0.2,
            beta: 3.0,
            alpha: 0.3,
            sigma_prime: 0.2,
            z_mode: ZMode::One,
            treat_prob: 0.5,
            dim_b: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub family: DgpFamily,
    pub n: usize,
    pub params: DgpParams,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(family: DgpFamily, n: usize, seed: u64) -> Self {
        Self {
            family,
            n,
            params: DgpParams::default(),
            seed,
        }
    }

    pub fn with_params(mut self, params: DgpParams) -> Self {
        self.params = params;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if matches!(self.family, DgpFamily::DgpAConfounded | DgpFamily::DgpEffect) {
            if p.a.is_empty() || p.a.len() != p.b.len() {
                return Err(Error::invalid("a and b must be nonempty and of equal length"));
            }
        } else if p.dim_b == 0 {
            return Err(Error::invalid("covariate dimension must be positive"));
        }
        if !(p.sigma >= 0.0 && p.sigma_prime >= 0.0) {
            return Err(Error::invalid("noise scales must be nonnegative"));
        }
        if !(p.treat_prob > 0.0 && p.treat_prob < 1.0) {
            return Err(Error::invalid("treatment probability must lie in (0, 1)"));
        }
        if !(p.alpha > -1.0) {
            return Err(Error::invalid("alpha must exceed -1"));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Dataset> {
        match self.family {
            DgpFamily::DgpAConfounded => generate_dgp_a(self),
            DgpFamily::DgpBRandomized => generate_dgp_b(self),
            DgpFamily::DgpEffect => generate_dgp_effect(self),
        }
    }
}

fn sigmoid_neg(z: f64) -> f64 {
    1.0 / (1.0 + z.exp())
}

fn dot(a: &[f64], x: &[f64]) -> f64 {
    a.iter().zip(x).map(|(u, v)| u * v).sum()
}

fn normals(rng: &mut StreamRng, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.sample(StandardNormal)).collect()
}

static CENTERING_CACHE: Mutex<Vec<(Vec<u64>, f64)>> = Mutex::new(Vec::new());

/// `E_X[(1 + exp(a'X))^-2]` for `X ~ N(0, I)`, estimated once per `a` from
/// a fixed-seed Monte Carlo sample.
pub fn dgp_a_centering(a: &[f64]) -> f64 {
    let key: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
    if let Some(&(_, c)) = CENTERING_CACHE.lock().unwrap().iter().find(|(k, _)| *k == key) {
        return c;
    }
    let c = centering_draws(a).iter().map(|s| s * s).sum::<f64>() / CENTERING_DRAWS as f64;
    CENTERING_CACHE.lock().unwrap().push((key, c));
    c
}

fn centering_draws(a: &[f64]) -> Vec<f64> {
    let mut rng = substream(CENTERING_SEED, 0);
    let mut x = vec![0.0; a.len()];
    (0..CENTERING_DRAWS)
        .map(|_| {
            for v in x.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            sigmoid_neg(dot(a, &x))
        })
        .collect()
}

/// Unclamped confounded propensity at `x`.
pub fn dgp_a_raw_propensity(a: &[f64], x: &[f64], centering: f64) -> f64 {
    let s = sigmoid_neg(dot(a, x));
    s * s - centering + 0.5
}

/// Fraction of covariate draws whose propensity hits the clamp, over the
/// centring sample.
pub fn dgp_a_clamp_rate(a: &[f64]) -> f64 {
    let c = dgp_a_centering(a);
    let hits = centering_draws(a)
        .iter()
        .map(|s| s * s - c + 0.5)
        .filter(|&p| p < DGP_A_CLAMP.0 || p > DGP_A_CLAMP.1)
        .count();
    hits as f64 / CENTERING_DRAWS as f64
}

fn confounded_covariates(spec: &DgpSpec) -> Vec<f64> {
    let d = spec.params.a.len();
    normals(&mut substream(spec.seed, stream::DGP_COVARIATES), spec.n * d)
}

fn assemble(x: PointSet, t: Vec<Arm>, y0: Vec<f64>, y1: Vec<f64>, e: Vec<f64>) -> Result<Dataset> {
    let y: Vec<f64> = t
        .iter()
        .enumerate()
        .map(|(i, a)| if *a == Arm::Treated { y1[i] } else { y0[i] })
        .collect();
    let mut ds = Dataset::new(x, t, PointSet::from_scalars(&y))?
        .with_counterfactuals(PointSet::from_scalars(&y0), PointSet::from_scalars(&y1))?;
    ds.true_e = Some(e);
    Ok(ds)
}

fn draw_treatments(seed: u64, e: &[f64]) -> Vec<Arm> {
    let mut rng = substream(seed, stream::DGP_TREATMENT);
    e.iter()
        .map(|&p| if rng.random::<f64>() < p { Arm::Treated } else { Arm::Control })
        .collect()
}

/// `X ~ N(0, I)`, centred squared-sigmoid propensity clamped to
/// [`DGP_A_CLAMP`], `Y = b'X + beta T + eps`.
pub fn generate_dgp_a(spec: &DgpSpec) -> Result<Dataset> {
    if spec.family != DgpFamily::DgpAConfounded {
        return Err(Error::invalid("spec is not a confounded-DGP spec"));
    }
    spec.validate()?;
    let p = &spec.params;
    let d = p.a.len();
    let xs = confounded_covariates(spec);
    let c = dgp_a_centering(&p.a);
    let e: Vec<f64> = xs
        .chunks(d)
        .map(|x| dgp_a_raw_propensity(&p.a, x, c).clamp(DGP_A_CLAMP.0, DGP_A_CLAMP.1))
        .collect();
    let t = draw_treatments(spec.seed, &e);
    let eps = normals(&mut substream(spec.seed, stream::DGP_NOISE), spec.n);
    let y0: Vec<f64> = xs.chunks(d).zip(&eps).map(|(x, e)| dot(&p.b, x) + p.sigma * e).collect();
    let y1: Vec<f64> = y0.iter().map(|v| v + p.beta).collect();
    assemble(PointSet::new(d, xs)?, t, y0, y1, e)
}

/// `T ~ Ber(q)`, `X ~ N(0, (1 + alpha T) I)`, `Y = f_T(X) + eps'` with
/// `f_0(x) = x_1`, `f_1(x) = x_1^2`. The recorded propensity is the exact
/// posterior `P(T = 1 | X = x)`.
pub fn generate_dgp_b(spec: &DgpSpec) -> Result<Dataset> {
    if spec.family != DgpFamily::DgpBRandomized {
        return Err(Error::invalid("spec is not a randomised-DGP spec"));
    }
    spec.validate()?;
    let p = &spec.params;
    let d = p.dim_b;
    let mut trng = substream(spec.seed, stream::DGP_TREATMENT);
    let t: Vec<Arm> = (0..spec.n)
        .map(|_| if trng.random::<f64>() < p.treat_prob { Arm::Treated } else { Arm::Control })
        .collect();
    let mut xs = normals(&mut substream(spec.seed, stream::DGP_COVARIATES), spec.n * d);
    let scale = (1.0 + p.alpha).sqrt();
    for (row, a) in xs.chunks_mut(d).zip(&t) {
        if *a == Arm::Treated {
            row.iter_mut().for_each(|v| *v *= scale);
        }
    }
    let eps = normals(&mut substream(spec.seed, stream::DGP_NOISE), spec.n);
    let prior_logit = (p.treat_prob / (1.0 - p.treat_prob)).ln();
    let mut y0 = Vec::with_capacity(spec.n);
    let mut y1 = Vec::with_capacity(spec.n);
    let mut e = Vec::with_capacity(spec.n);
    for (x, eps) in xs.chunks(d).zip(&eps) {
        y0.push(x[0] + p.sigma_prime * eps);
        y1.push(x[0] * x[0] + p.sigma_prime * eps);
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let log_ratio = -0.5 * d as f64 * (1.0 + p.alpha).ln() + 0.5 * r2 * (1.0 - 1.0 / (1.0 + p.alpha));
        e.push(1.0 / (1.0 + (-(prior_logit + log_ratio)).exp()));
    }
    assemble(PointSet::new(d, xs)?, t, y0, y1, e)
}

/// `X ~ N(0, I)`, `p = 1 / (1 + exp(a'X))`,
/// `Y = b'X + beta (2Z - 1) T + eps`. Both counterfactuals share the unit's
/// `Z` draw.
pub fn generate_dgp_effect(spec: &DgpSpec) -> Result<Dataset> {
    if spec.family != DgpFamily::DgpEffect {
        return Err(Error::invalid("spec is not an effect-DGP spec"));
    }
    spec.validate()?;
    let p = &spec.params;
    let d = p.a.len();
    let xs = confounded_covariates(spec);
    let e: Vec<f64> = xs.chunks(d).map(|x| sigmoid_neg(dot(&p.a, x))).collect();
    let t = draw_treatments(spec.seed, &e);
    let eps = normals(&mut substream(spec.seed, stream::DGP_NOISE), spec.n);
    let mut zrng = substream(spec.seed, stream::DGP_MULTIPLIER);
    let mut y0 = Vec::with_capacity(spec.n);
    let mut y1 = Vec::with_capacity(spec.n);
    for (x, eps) in xs.chunks(d).zip(&eps) {
        let z = match p.z_mode {
            ZMode::One => 1.0,
            ZMode::Bernoulli => f64::from(u8::from(zrng.random::<bool>())),
            ZMode::Uniform => zrng.random::<f64>(),
        };
        let base = dot(&p.b, x) + p.sigma * eps;
        y0.push(base);
        y1.push(base + p.beta * (2.0 * z - 1.0));
    }
    assemble(PointSet::new(d, xs)?, t, y0, y1, e)
}

/// `n_oracle` i.i.d. draws of `Y(arm)`, restricted to units with
/// `T = condition` when given (by rejection over fresh batches).
pub fn oracle_embedding_sample(spec: &DgpSpec, arm: Arm, condition: Option<Arm>, n_oracle: usize) -> Result<PointSet> {
    if n_oracle == 0 {
        return Err(Error::invalid("oracle sample size must be positive"));
    }
    let batch = n_oracle.clamp(1024, 200_000);
    let mut out: Vec<f64> = Vec::with_capacity(n_oracle);
    let mut dim = 0;
    for b in 0..10_000u64 {
        let batch_spec = DgpSpec {
            n: batch,
            seed: derive_seed(spec.seed, &[stream::ORACLE, b]),
            ..spec.clone()
        };
        let ds = batch_spec.generate()?;
        let ys = match arm {
            Arm::Control => ds.y0.as_ref(),
            Arm::Treated => ds.y1.as_ref(),
        }
        .ok_or_else(|| Error::invalid("family has no counterfactuals"))?;
        dim = ys.dim();
        for i in 0..ds.n() {
            if condition.is_none_or(|c| ds.t[i] == c) {
                out.extend_from_slice(ys.point(i));
                if out.len() == n_oracle * dim {
                    return PointSet::new(dim, out);
                }
            }
        }
    }
    Err(Error::invalid(format!(
        "could not collect {n_oracle} oracle draws (got {})",
        out.len() / dim.max(1)
    )))
}
