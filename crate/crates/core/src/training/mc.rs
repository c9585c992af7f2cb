use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gla::{stack_forward, GlaParams, ReducedParams};
use crate::rng::{child_seed, mean_and_stderr};
use crate::task_gen::{sample_prompt, sample_prompt_summary, TaskConfig};

fn check_trials(trials: usize) -> Result<()> {
    if trials < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 trials for a standard error, got {trials}")));
    }
    Ok(())
}

fn finish(errors: Vec<f64>) -> Result<(f64, f64)> {
    let (mean, se) = mean_and_stderr(&errors);
    if !mean.is_finite() {
        return Err(Error::NonFinite("Monte Carlo squared error".into()));
    }
    Ok((mean, se))
}

/// Mean and standard error of `(ŷ − y)²` for the reduced predictor on fresh
/// prompts drawn from `task` with forgetting factor `lam`. Trial `t` uses
/// prompt seed `child_seed(seed, t)`; the result does not depend on the
/// number of worker threads.
pub fn mc_error_estimate(rp: &ReducedParams, task: &TaskConfig, lam: f64, trials: usize, seed: u64) -> Result<(f64, f64)> {
    check_trials(trials)?;
    if rp.d() != task.d() {
        return Err(Error::DimensionMismatch {
            what: "reduced parameter dimension",
            expected: task.d(),
            got: rp.d(),
        });
    }
    let errors: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let s = sample_prompt_summary(task, lam, child_seed(seed, t));
            let r = rp.u_neg1 * s.h.dot(&(&rp.u11 * &s.query)) - s.label;
            r * r
        })
        .collect();
    finish(errors)
}

/// Same estimate for a residual stack of full layers.
pub fn mc_stack_error(layers: &[GlaParams], task: &TaskConfig, trials: usize, seed: u64) -> Result<(f64, f64)> {
    check_trials(trials)?;
    let errors = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let p = sample_prompt(task, child_seed(seed, t));
            let r = stack_forward(layers, &p)? - p.query_label();
            Ok(r * r)
        })
        .collect::<Result<Vec<f64>>>()?;
    finish(errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gla::predict_reduced;
    use nalgebra::DMatrix;

    #[test]
    fn rejects_single_trial() {
        let cfg = TaskConfig::isotropic(2, 5, 0.9, 1.0, 0.0).unwrap();
        let rp = ReducedParams::zeros(2);
        assert!(mc_error_estimate(&rp, &cfg, 0.9, 1, 0).is_err());
    }

    #[test]
    fn zero_predictor_estimates_label_variance() {
        // With ŷ = 0 the error is y² and E[y²] = d·E[w²] = d·σw² at γ=1, σe²=0.
        let cfg = TaskConfig::isotropic(3, 4, 1.0, 1.0, 0.0).unwrap();
        let (m, se) = mc_error_estimate(&ReducedParams::zeros(3), &cfg, 0.9, 20000, 1).unwrap();
        assert!((m - 3.0).abs() < 4.0 * se, "{m} ± {se}");
    }

    #[test]
    fn reduced_and_stack_estimates_agree() {
        let cfg = TaskConfig::isotropic(2, 6, 0.9, 1.0, 0.05).unwrap();
        let rp = ReducedParams::new(DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.4]), 0.8).unwrap();
        let a = mc_error_estimate(&rp, &cfg, 0.85, 50, 9).unwrap();
        let b = mc_stack_error(&[rp.embed(0.85)], &cfg, 50, 9).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12 * a.0.max(1.0));
        let p = sample_prompt(&cfg, child_seed(9, 0));
        assert!(predict_reduced(&rp, &p, 0.85).is_finite());
    }
}
