//! Closed-form optimum, reduced population loss and its gradient flow, the
//! PL constant of the flow, and exact training/testing errors.
//!
//! The reduced loss is
//! `L̃(U11, u₋₁) = (u₋₁²/2) tr(Λ̃ΛU11ΛU11ᵀ) − D1 u₋₁ tr(Λ²U11ᵀ)`; it differs from
//! half the population squared error by the constant `D4 tr(Λ)/2`.

use nalgebra::DMatrix;

use crate::constants::{constant_set, ConstantSet};
use crate::error::{Error, Result};
use crate::gla::ReducedParams;
use crate::linalg::{spd_inverse, spd_sqrt, spectral_norm_sym};
use crate::task_gen::TaskConfig;

/// Structured initialization `U11 = σΘΘᵀ`, `u₋₁ = σ`.
#[derive(Clone, Debug)]
pub struct InitConfig {
    pub sigma: f64,
    pub theta: DMatrix<f64>,
}

impl InitConfig {
    pub fn new(sigma: f64, theta: DMatrix<f64>) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
        }
        if !theta.is_square() {
            return Err(Error::DimensionMismatch {
                what: "theta columns",
                expected: theta.nrows(),
                got: theta.ncols(),
            });
        }
        let norm = (&theta * theta.transpose()).norm();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidConfig(format!("theta must satisfy ||theta theta^T||_F = 1, got {norm}")));
        }
        Ok(Self { sigma, theta })
    }

    /// Rescale an arbitrary nonzero `Θ` so that `‖ΘΘᵀ‖_F = 1`.
    pub fn normalize_theta(theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let norm = (theta * theta.transpose()).norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidConfig("theta must be nonzero".into()));
        }
        Ok(theta / norm.sqrt())
    }

    /// `σ = fraction · sigma_bound(cs)`.
    pub fn at_fraction_of_bound(cs: &ConstantSet, theta: DMatrix<f64>, fraction: f64) -> Result<Self> {
        let init = Self::new(fraction * sigma_bound(cs), theta)?;
        init.validate(cs)?;
        Ok(init)
    }

    /// Checks that depend on the constants: `ΛΘ ≠ 0` and the bound on `σ`.
    pub fn validate(&self, cs: &ConstantSet) -> Result<()> {
        if self.theta.nrows() != cs.d() {
            return Err(Error::DimensionMismatch {
                what: "theta dimension",
                expected: cs.d(),
                got: self.theta.nrows(),
            });
        }
        if (cs.lambda_cov() * &self.theta).norm() <= 1e-12 {
            return Err(Error::InvalidConfig("Lambda * theta vanishes".into()));
        }
        let bound = sigma_bound(cs);
        if self.sigma >= bound {
            return Err(Error::InvalidConfig(format!(
                "sigma = {} violates the initialization bound {bound}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Distribution of test prompts, possibly shifted from training, and the
/// forgetting factor used at test time.
#[derive(Clone, Debug)]
pub struct TestConfig {
    task: TaskConfig,
    lam_bar: f64,
}

impl TestConfig {
    pub fn new(
        m: usize,
        gamma_bar: f64,
        sigma_w2_bar: f64,
        sigma_e2_bar: f64,
        lambda_cov_bar: DMatrix<f64>,
        lam_bar: f64,
    ) -> Result<Self> {
        let task = TaskConfig::new(m, gamma_bar, sigma_w2_bar, sigma_e2_bar, lambda_cov_bar)?;
        Self::from_task(task, lam_bar)
    }

    pub fn from_task(task: TaskConfig, lam_bar: f64) -> Result<Self> {
        if !(lam_bar > 0.0 && lam_bar <= 1.0) {
            return Err(Error::InvalidConfig(format!("test forgetting factor must lie in (0, 1], got {lam_bar}")));
        }
        Ok(Self { task, lam_bar })
    }

    pub fn task(&self) -> &TaskConfig {
        &self.task
    }
    pub fn m(&self) -> usize {
        self.task.n()
    }
    pub fn lam_bar(&self) -> f64 {
        self.lam_bar
    }
}

fn inverse_lambda_tilde(cs: &ConstantSet) -> Result<DMatrix<f64>> {
    spd_inverse(&cs.lambda_tilde, "effective covariance")
}

pub fn closed_form_optimum(cs: &ConstantSet) -> Result<ReducedParams> {
    let inv = inverse_lambda_tilde(cs)?;
    let f = inv.norm();
    let u11 = &inv * (cs.d1 / f).sqrt();
    ReducedParams::new(u11, (cs.d1 * f).sqrt())
}

pub fn population_loss_reduced(rp: &ReducedParams, cs: &ConstantSet) -> f64 {
    let lam = cs.lambda_cov();
    let u = rp.u_neg1;
    let quad = (&cs.lambda_tilde * lam * &rp.u11 * lam).component_mul(&rp.u11).sum();
    let lin = (lam * lam).component_mul(&rp.u11).sum();
    0.5 * u * u * quad - cs.d1 * u * lin
}

/// `min L̃ = −(D1²/2) tr(Λ²Λ̃⁻¹)`.
pub fn population_loss_min(cs: &ConstantSet) -> Result<f64> {
    let inv = inverse_lambda_tilde(cs)?;
    let lam = cs.lambda_cov();
    Ok(-0.5 * cs.d1 * cs.d1 * (lam * lam * inv).trace())
}

/// `L̃(rp) − min L̃ = ½‖Λ̃^{1/2} Λ^{1/2} (u₋₁U11 − D1Λ̃⁻¹) Λ^{1/2}‖_F²`.
pub fn population_loss_residual(rp: &ReducedParams, cs: &ConstantSet) -> Result<f64> {
    let inv = inverse_lambda_tilde(cs)?;
    let lt_half = spd_sqrt(&cs.lambda_tilde, "effective covariance")?;
    let l_half = spd_sqrt(cs.lambda_cov(), "input covariance")?;
    let gap = rp.product() - inv * cs.d1;
    let m = lt_half * &l_half * gap * l_half;
    Ok(0.5 * m.norm_squared())
}

/// `‖u₋₁U11 − D1Λ̃⁻¹‖_F`.
pub fn product_residual(rp: &ReducedParams, cs: &ConstantSet) -> Result<f64> {
    let inv = inverse_lambda_tilde(cs)?;
    Ok((rp.product() - inv * cs.d1).norm())
}

/// Negative gradient of [`population_loss_reduced`] in `(U11, u₋₁)`.
pub fn flow_field(rp: &ReducedParams, cs: &ConstantSet) -> (DMatrix<f64>, f64) {
    let lam = cs.lambda_cov();
    let u = rp.u_neg1;
    let lam2 = lam * lam;
    let a = &cs.lambda_tilde * lam * &rp.u11 * lam;
    let du11 = &lam2 * (cs.d1 * u) - &a * (u * u);
    let du = -u * a.component_mul(&rp.u11).sum() + cs.d1 * lam2.component_mul(&rp.u11).sum();
    (du11, du)
}

/// Largest `σ` admitted by the structured initialization:
/// `sqrt(2D1/(√d ‖Λ̃‖))`.
pub fn sigma_bound(cs: &ConstantSet) -> f64 {
    let sqrt_d = (cs.d() as f64).sqrt();
    (2.0 * cs.d1 / (sqrt_d * spectral_norm_sym(&cs.lambda_tilde))).sqrt()
}

/// `σ²‖ΛΘ‖_F²(2D1 − √d σ²‖Λ̃‖)`, shared by the positivity floor and the PL constant.
fn init_margin(cs: &ConstantSet, init: &InitConfig) -> Result<f64> {
    init.validate(cs)?;
    let s2 = init.sigma * init.sigma;
    let sqrt_d = (cs.d() as f64).sqrt();
    let lt = (cs.lambda_cov() * &init.theta).norm_squared();
    Ok(s2 * lt * (2.0 * cs.d1 - sqrt_d * s2 * spectral_norm_sym(&cs.lambda_tilde)))
}

/// Lower bound on `u₋₁(t)` along the flow started from `init`.
pub fn positivity_floor(cs: &ConstantSet, init: &InitConfig) -> Result<f64> {
    let margin = init_margin(cs, init)?;
    let sqrt_d = (cs.d() as f64).sqrt();
    let norm_l = spectral_norm_sym(cs.lambda_cov());
    Ok((margin / (2.0 * cs.d1 * sqrt_d * norm_l * norm_l)).sqrt())
}

/// Rate `α` with `L̃(t) − min L̃ ≤ e^{−αt}(L̃(0) − min L̃)`.
pub fn pl_constant(cs: &ConstantSet, init: &InitConfig) -> Result<f64> {
    let margin = init_margin(cs, init)?;
    let sqrt_d = (cs.d() as f64).sqrt();
    let lam = cs.lambda_cov();
    let norm_l = spectral_norm_sym(lam);
    let lam_inv = spd_inverse(lam, "input covariance")?;
    let lt_inv = inverse_lambda_tilde(cs)?;
    let denom = cs.d1 * sqrt_d * norm_l * norm_l * (&lt_inv * &lam_inv).trace() * lam_inv.trace();
    Ok(margin / denom)
}

/// Mean squared error of `ŷ = D1 h̄ᵀ Λ̃⁻¹ x̄` on prompts whose statistics are
/// `(D̄1..D̄4, Λ̄)`, with `h̄ = Σ λ̄^{m+1−i} ȳ_i x̄_i`.
fn optimum_error(cs_train: &ConstantSet, bar: &ConstantSet) -> Result<f64> {
    let lb = bar.lambda_cov();
    let y2 = bar.d4 * lb.trace();
    if cs_train.d1 == 0.0 {
        return Ok(y2);
    }
    let inv = inverse_lambda_tilde(cs_train)?;
    let sandwich = &inv * lb * &inv * lb;
    let triple = lb * &sandwich;
    let d1 = cs_train.d1;
    let quad = bar.d2 * (lb.trace() * sandwich.trace() + 2.0 * triple.trace()) + bar.d3 * triple.trace();
    let cross = (lb * &inv * lb).trace();
    Ok(d1 * d1 * quad + y2 - 2.0 * d1 * bar.d1 * cross)
}

/// `E[(ŷ − y)²]` at the closed-form optimum on training prompts.
pub fn training_error(cs: &ConstantSet) -> Result<f64> {
    if cs.is_degenerate() {
        return Ok(0.0);
    }
    optimum_error(cs, cs)
}

/// `d·c·(D4 − D1²/((2+d)D2 + D3))`, valid when `Λ = c·I`.
pub fn training_error_isotropic(cs: &ConstantSet) -> Result<f64> {
    let lam = cs.lambda_cov();
    let d = cs.d();
    let c = lam[(0, 0)];
    if (lam - DMatrix::identity(d, d) * c).amax() > 0.0 {
        return Err(Error::InvalidConfig("input covariance is not a multiple of the identity".into()));
    }
    let df = d as f64;
    let s = (2.0 + df) * cs.d2 + cs.d3;
    Ok(df * c * (cs.d4 - cs.d1 * cs.d1 / s))
}

/// `E[(ỹ − ȳ)²]` at the training optimum on test prompts.
pub fn testing_error(cs_train: &ConstantSet, test: &TestConfig) -> Result<f64> {
    if test.task().d() != cs_train.d() {
        return Err(Error::DimensionMismatch {
            what: "test dimension",
            expected: cs_train.d(),
            got: test.task().d(),
        });
    }
    let bar = constant_set(test.task(), test.lam_bar())?;
    optimum_error(cs_train, &bar)
}

/// Training error tabulated over forgetting factors.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSweep {
    pub points: Vec<(f64, f64)>,
}

impl LambdaSweep {
    /// `λ` with the smallest training error (first one on ties).
    pub fn argmin(&self) -> f64 {
        self.points
            .iter()
            .fold((f64::NAN, f64::INFINITY), |best, &(l, e)| if e < best.1 { (l, e) } else { best })
            .0
    }
}

pub fn lambda_sweep_theoretical(cfg: &TaskConfig, lambdas: &[f64]) -> Result<LambdaSweep> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("lambda list is empty".into()));
    }
    let points = lambdas
        .iter()
        .map(|&lam| {
            if !(lam > 0.0 && lam <= 1.0) {
                return Err(Error::InvalidConfig(format!("lambda must lie in (0, 1], got {lam}")));
            }
            Ok((lam, training_error(&constant_set(cfg, lam)?)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LambdaSweep { points })
}
