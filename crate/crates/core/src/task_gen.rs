//! AR(1) weight paths, prompt construction and the exact second moments of the
//! weight process.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{stream_rng, INPUT_STREAM, WEIGHT_STREAM};

/// `|γ − 1|` below this selects the random-walk covariance formula.
pub const GAMMA_ONE_TOL: f64 = 1e-9;

/// Parameters of one task distribution.
#[derive(Clone, Debug)]
pub struct TaskConfig {
    n: usize,
    gamma: f64,
    sigma_w2: f64,
    sigma_e2: f64,
    lambda_cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl TaskConfig {
    pub fn new(n: usize, gamma: f64, sigma_w2: f64, sigma_e2: f64, lambda_cov: DMatrix<f64>) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {gamma}")));
        }
        if !(sigma_w2 >= 0.0 && sigma_w2.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_w2 must be >= 0, got {sigma_w2}")));
        }
        if !(sigma_e2 >= 0.0 && sigma_e2.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_e2 must be >= 0, got {sigma_e2}")));
        }
        if lambda_cov.nrows() == 0 {
            return Err(Error::InvalidConfig("dimension d must be at least 1".into()));
        }
        if !linalg::is_symmetric(&lambda_cov, 1e-12) {
            return Err(Error::InvalidConfig("input covariance is not symmetric".into()));
        }
        linalg::spd_eigen(&lambda_cov, "input covariance")?;
        let chol = lambda_cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite {
                what: "input covariance",
                min_eigenvalue: f64::NAN,
            })?
            .unpack();
        Ok(Self {
            n,
            gamma,
            sigma_w2,
            sigma_e2,
            lambda_cov,
            chol,
        })
    }

    /// `Λ = I_d`.
    pub fn isotropic(d: usize, n: usize, gamma: f64, sigma_w2: f64, sigma_e2: f64) -> Result<Self> {
        Self::new(n, gamma, sigma_w2, sigma_e2, DMatrix::identity(d, d))
    }

    pub fn d(&self) -> usize {
        self.lambda_cov.nrows()
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn sigma_w2(&self) -> f64 {
        self.sigma_w2
    }
    pub fn sigma_e2(&self) -> f64 {
        self.sigma_e2
    }
    pub fn lambda_cov(&self) -> &DMatrix<f64> {
        &self.lambda_cov
    }
    /// Lower Cholesky factor of `Λ`.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Same distribution with a different context length.
    pub fn with_n(&self, n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        Ok(Self { n, ..self.clone() })
    }

    pub(crate) fn sample_input(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = standard_normal_vector(rng, self.d());
        &self.chol * z
    }
}

pub(crate) fn standard_normal_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// The weights `w_0, w_1, ..., w_{n+1}` of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightPath {
    w0: DVector<f64>,
    /// Column `i − 1` holds `w_i`.
    weights: DMatrix<f64>,
}

impl WeightPath {
    pub fn new(w0: DVector<f64>, weights: DMatrix<f64>) -> Result<Self> {
        if weights.nrows() != w0.len() {
            return Err(Error::DimensionMismatch {
                what: "weight path rows",
                expected: w0.len(),
                got: weights.nrows(),
            });
        }
        Ok(Self { w0, weights })
    }

    pub fn w0(&self) -> &DVector<f64> {
        &self.w0
    }
    /// Matrix whose columns are `w_1 .. w_{n+1}`.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }
    /// Number of weights after `w_0` (that is `n + 1`).
    pub fn len(&self) -> usize {
        self.weights.ncols()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.ncols() == 0
    }
    /// `w_i` for `i` in `0..=n+1`.
    pub fn w(&self, i: usize) -> DVector<f64> {
        if i == 0 {
            self.w0.clone()
        } else {
            self.weights.column(i - 1).into_owned()
        }
    }
}

/// A prompt `Z` together with the hidden path and the query label.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    tokens: DMatrix<f64>,
    query_label: f64,
    path: WeightPath,
}

impl Prompt {
    /// `(d+1) × (n+1)` token matrix; the last row holds labels, with the
    /// query's label slot set to zero.
    pub fn tokens(&self) -> &DMatrix<f64> {
        &self.tokens
    }
    pub fn query_label(&self) -> f64 {
        self.query_label
    }
    pub fn path(&self) -> &WeightPath {
        &self.path
    }
    pub fn d(&self) -> usize {
        self.tokens.nrows() - 1
    }
    pub fn n(&self) -> usize {
        self.tokens.ncols() - 1
    }
    /// Query input `x_{n+1}`.
    pub fn query(&self) -> DVector<f64> {
        let d = self.d();
        self.tokens.view((0, self.n()), (d, 1)).column(0).into_owned()
    }
    /// Overwrite the query-label slot of the tokens (normally zero); lets
    /// tests probe that predictions never read it.
    #[cfg(test)]
    pub(crate) fn set_query_label_slot(&mut self, v: f64) {
        let (d, n) = (self.d(), self.n());
        self.tokens[(d, n)] = v;
    }

    /// `Σ_{i≤n} λ^{n+1−i} y_i x_i`.
    pub fn discounted_label_input(&self, lam: f64) -> DVector<f64> {
        let (d, n) = (self.d(), self.n());
        let mut h = DVector::zeros(d);
        for i in 0..n {
            h *= lam;
            let y = self.tokens[(d, i)];
            h += self.tokens.view((0, i), (d, 1)).column(0) * y;
        }
        h * lam
    }
}

pub fn sample_weight_path(cfg: &TaskConfig, seed: u64) -> WeightPath {
    let mut rng = stream_rng(seed, WEIGHT_STREAM);
    let d = cfg.d();
    let w0 = standard_normal_vector(&mut rng, d) * cfg.sigma_w2.sqrt();
    let se = cfg.sigma_e2.sqrt();
    let mut weights = DMatrix::zeros(d, cfg.n + 1);
    let mut w = w0.clone();
    for i in 0..=cfg.n {
        let e = standard_normal_vector(&mut rng, d);
        w = w * cfg.gamma + e * se;
        weights.set_column(i, &w);
    }
    WeightPath { w0, weights }
}

pub fn build_prompt(cfg: &TaskConfig, path: &WeightPath, seed: u64) -> Result<Prompt> {
    let d = cfg.d();
    if path.weights.nrows() != d {
        return Err(Error::DimensionMismatch {
            what: "weight dimension",
            expected: d,
            got: path.weights.nrows(),
        });
    }
    if path.len() != cfg.n + 1 {
        return Err(Error::DimensionMismatch {
            what: "weight path length",
            expected: cfg.n + 1,
            got: path.len(),
        });
    }
    let mut rng = stream_rng(seed, INPUT_STREAM);
    let mut tokens = DMatrix::zeros(d + 1, cfg.n + 1);
    let mut query_label = 0.0;
    for i in 0..=cfg.n {
        let x = cfg.sample_input(&mut rng);
        let y = path.weights.column(i).dot(&x);
        tokens.view_mut((0, i), (d, 1)).copy_from(&x);
        if i < cfg.n {
            tokens[(d, i)] = y;
        } else {
            query_label = y;
        }
    }
    Ok(Prompt {
        tokens,
        query_label,
        path: path.clone(),
    })
}

/// Fresh weight path and inputs, both keyed by `seed`.
pub fn sample_prompt(cfg: &TaskConfig, seed: u64) -> Prompt {
    let path = sample_weight_path(cfg, seed);
    build_prompt(cfg, &path, seed).expect("path sampled from the same config")
}

/// What a reduced-coordinate predictor sees of a prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSummary {
    /// `Σ_{i≤n} λ^{n+1−i} y_i x_i`
    pub h: DVector<f64>,
    /// `x_{n+1}`
    pub query: DVector<f64>,
    /// `y_{n+1}`
    pub label: f64,
}

/// Summary of `sample_prompt(cfg, seed)` without materializing the tokens;
/// draws the same random numbers in the same order.
pub fn sample_prompt_summary(cfg: &TaskConfig, lam: f64, seed: u64) -> PromptSummary {
    let d = cfg.d();
    let mut wrng = stream_rng(seed, WEIGHT_STREAM);
    let mut xrng = stream_rng(seed, INPUT_STREAM);
    let se = cfg.sigma_e2.sqrt();
    let mut w = standard_normal_vector(&mut wrng, d) * cfg.sigma_w2.sqrt();
    let mut h = DVector::zeros(d);
    for _ in 0..cfg.n {
        w = w * cfg.gamma + standard_normal_vector(&mut wrng, d) * se;
        let x = cfg.sample_input(&mut xrng);
        let y = w.dot(&x);
        h *= lam;
        h += x * y;
    }
    w = w * cfg.gamma + standard_normal_vector(&mut wrng, d) * se;
    let query = cfg.sample_input(&mut xrng);
    let label = w.dot(&query);
    PromptSummary { h: h * lam, query, label }
}

/// `(γ²)^k − 1` without cancellation, given `γ² − 1`.
fn pow_m1(base_minus_1: f64, k: f64) -> f64 {
    (k * base_minus_1.ln_1p()).exp_m1()
}

/// `c(a, b)` with `E[w_a w_bᵀ] = c(a, b)·I`.
pub fn weight_cross_covariance(cfg: &TaskConfig, a: usize, b: usize) -> f64 {
    cross_covariance(cfg.gamma, cfg.sigma_w2, cfg.sigma_e2, a, b)
}

pub(crate) fn cross_covariance(gamma: f64, sw2: f64, se2: f64, a: usize, b: usize) -> f64 {
    let lo = a.min(b);
    if (gamma - 1.0).abs() < GAMMA_ONE_TOL {
        return sw2 + lo as f64 * se2;
    }
    // γ^{a+b}σ_w² + γ^{|a−b|}((γ²)^{min(a,b)} − 1)/(γ² − 1)·σ_e²
    let g2m1 = (gamma - 1.0) * (gamma + 1.0);
    let sum = (a + b) as f64;
    let gap = a.abs_diff(b) as f64;
    gamma.powf(sum) * sw2 + gamma.powf(gap) * pow_m1(g2m1, lo as f64) / g2m1 * se2
}
