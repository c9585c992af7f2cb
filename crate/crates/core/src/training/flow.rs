use nalgebra::DMatrix;

use super::Trajectory;
use crate::constants::ConstantSet;
use crate::error::{Error, Result};
use crate::gla::ReducedParams;
use crate::linalg::{spd_inverse, spd_sqrt, spectral_norm_sym};
use crate::theory::{flow_field, InitConfig};

/// Recorded states are thinned to at most about this many.
const MAX_RECORDS: usize = 4096;
/// Divergence is declared when the loss gap exceeds this multiple of its start.
const DIVERGENCE_FACTOR: f64 = 10.0;
const MAX_HALVINGS: usize = 30;

/// `U11 = σΘΘᵀ`, `u₋₁ = σ`, after checking `init` against `cs`.
pub fn init_from_assumption(init: &InitConfig, cs: &ConstantSet) -> Result<ReducedParams> {
    init.validate(cs)?;
    ReducedParams::new(&init.theta * init.theta.transpose() * init.sigma, init.sigma)
}

/// Quantities fixed along a flow: the optimum product and the factors of the
/// loss-gap norm.
struct Geometry {
    target: DMatrix<f64>,
    left: DMatrix<f64>,
    right: DMatrix<f64>,
}

impl Geometry {
    fn new(cs: &ConstantSet) -> Result<Self> {
        let inv = spd_inverse(&cs.lambda_tilde, "effective covariance")?;
        let lt_half = spd_sqrt(&cs.lambda_tilde, "effective covariance")?;
        let l_half = spd_sqrt(cs.lambda_cov(), "input covariance")?;
        Ok(Self {
            target: inv * cs.d1,
            left: lt_half * &l_half,
            right: l_half,
        })
    }

    fn gap_and_residual(&self, rp: &ReducedParams) -> (f64, f64) {
        let diff = rp.product() - &self.target;
        let m = &self.left * &diff * &self.right;
        (0.5 * m.norm_squared(), diff.norm())
    }
}

/// `0.05 / (‖Λ̃‖‖Λ‖² max(u₋₁(0)², u₋₁*²) + D1‖Λ‖²)`.
pub fn default_flow_step(cs: &ConstantSet, init: &ReducedParams) -> Result<f64> {
    let inv = spd_inverse(&cs.lambda_tilde, "effective covariance")?;
    let u_star2 = cs.d1 * inv.norm();
    let l2 = spectral_norm_sym(cs.lambda_cov()).powi(2);
    let u2 = (init.u_neg1 * init.u_neg1).max(u_star2);
    Ok(0.05 / (spectral_norm_sym(&cs.lambda_tilde) * l2 * u2 + cs.d1 * l2))
}

fn rk4_step(rp: &ReducedParams, cs: &ConstantSet, h: f64) -> ReducedParams {
    let shift = |base: &ReducedParams, k: &(DMatrix<f64>, f64), s: f64| ReducedParams {
        u11: &base.u11 + &k.0 * s,
        u_neg1: base.u_neg1 + k.1 * s,
    };
    let k1 = flow_field(rp, cs);
    let k2 = flow_field(&shift(rp, &k1, h / 2.0), cs);
    let k3 = flow_field(&shift(rp, &k2, h / 2.0), cs);
    let k4 = flow_field(&shift(rp, &k3, h), cs);
    ReducedParams {
        u11: &rp.u11 + (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * (h / 6.0),
        u_neg1: rp.u_neg1 + (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1) * (h / 6.0),
    }
}

/// Classical fourth-order integration of the reduced gradient flow on
/// `[0, t_end]`. Stops once `‖u₋₁U11 − D1Λ̃⁻¹‖_F < 1e-10·min(1, ‖D1Λ̃⁻¹‖_F)`;
/// if the loss gap grows tenfold the step is halved and the run restarted.
pub fn gradient_flow(init: &ReducedParams, cs: &ConstantSet, t_end: f64, step: f64) -> Result<Trajectory> {
    if !(step > 0.0 && t_end > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "step and t_end must be positive, got step={step}, t_end={t_end}"
        )));
    }
    if init.d() != cs.d() {
        return Err(Error::DimensionMismatch {
            what: "reduced parameter dimension",
            expected: cs.d(),
            got: init.d(),
        });
    }
    let geo = Geometry::new(cs)?;
    let tol = 1e-10 * geo.target.norm().min(1.0);
    let mut h = step;
    for _ in 0..=MAX_HALVINGS {
        if let Some(traj) = integrate(init, cs, &geo, t_end, h, tol) {
            return Ok(traj);
        }
        h /= 2.0;
    }
    Err(Error::Divergence(format!(
        "gradient flow diverged even with step {h:e}"
    )))
}

fn integrate(init: &ReducedParams, cs: &ConstantSet, geo: &Geometry, t_end: f64, h: f64, tol: f64) -> Option<Trajectory> {
    let mut traj = Trajectory::default();
    let (gap0, res0) = geo.gap_and_residual(init);
    traj.push(0.0, init.clone(), gap0, res0);
    if res0 < tol {
        return Some(traj);
    }
    let total = (t_end / h).ceil() as usize;
    let mut stride = 1;
    let mut state = init.clone();
    for k in 1..=total {
        let t = (k as f64 * h).min(t_end);
        let dt = t - (k - 1) as f64 * h;
        state = rk4_step(&state, cs, dt);
        let (gap, res) = geo.gap_and_residual(&state);
        if !gap.is_finite() || gap > DIVERGENCE_FACTOR * gap0.max(f64::MIN_POSITIVE) {
            return None;
        }
        let done = res < tol;
        if done || k % stride == 0 || k == total {
            traj.push(t, state.clone(), gap, res);
            if traj.len() >= MAX_RECORDS && !done && k != total {
                traj.keep_even();
                stride *= 2;
            }
        }
        if done {
            break;
        }
    }
    Some(traj)
}
