//! LMS and RLS adaptive filters tracking a drifting linear regression stream.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{child_seed, mean_and_stderr, stream_rng, INPUT_STREAM, WEIGHT_STREAM};
use crate::task_gen::{standard_normal_vector, TaskConfig};

/// A trial whose a priori error exceeds this in magnitude is treated as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Fraction of the stream averaged for the steady-state statistic.
pub const DEFAULT_TAIL_FRACTION: f64 = 0.2;

/// Default RLS regularization: the inverse correlation starts at `I/δ`.
pub const DEFAULT_RLS_DELTA: f64 = 1e-2;

const TRIAL_CHUNK: usize = 256;

/// The drifting regression stream `w_t = γw_{t−1} + e_t`, `y_t = w_tᵀx_t`.
#[derive(Clone, Debug)]
pub struct StreamSpec {
    task: TaskConfig,
    length: usize,
    tail_fraction: f64,
}

impl StreamSpec {
    /// Drift and input statistics are taken from `task`; its prompt length is ignored.
    pub fn new(task: &TaskConfig, length: usize) -> Result<Self> {
        if length == 0 {
            return Err(Error::InvalidConfig("stream length must be positive".into()));
        }
        Ok(StreamSpec {
            task: task.clone(),
            length,
            tail_fraction: DEFAULT_TAIL_FRACTION,
        })
    }

    pub fn with_tail_fraction(mut self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("tail fraction must lie in (0, 1], got {fraction}")));
        }
        self.tail_fraction = fraction;
        Ok(self)
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn task(&self) -> &TaskConfig {
        &self.task
    }

    /// First step (0-based) of the steady-state window.
    pub fn window_start(&self) -> usize {
        let tail = ((self.length as f64 * self.tail_fraction).round() as usize).clamp(1, self.length);
        self.length - tail
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamResult {
    /// Squared a priori error at each step, averaged over the kept trials.
    pub per_step_sq_error: Vec<f64>,
    /// Mean over steps `window_start..length`.
    pub steady_state_mean: f64,
    pub steady_state_stderr: f64,
    /// Mean over every step.
    pub all_step_mean: f64,
    pub all_step_stderr: f64,
    pub window_start: usize,
    /// Trials kept in the averages.
    pub trials: usize,
    pub diverged: usize,
    /// RLS inverse-correlation resets after losing positive definiteness.
    pub reinitializations: usize,
}

enum TrialOutcome {
    Kept { errors: Vec<f64>, resets: usize },
    Diverged { resets: usize },
}

trait Filter {
    fn predict(&self, x: &DVector<f64>) -> f64;
    /// Returns true if the filter had to reset internal state.
    fn update(&mut self, x: &DVector<f64>, err: f64) -> bool;
}

struct Lms {
    w: DVector<f64>,
    mu: f64,
}

impl Filter for Lms {
    fn predict(&self, x: &DVector<f64>) -> f64 {
        self.w.dot(x)
    }
    fn update(&mut self, x: &DVector<f64>, err: f64) -> bool {
        self.w.axpy(self.mu * err, x, 1.0);
        false
    }
}

struct Rls {
    w: DVector<f64>,
    p: DMatrix<f64>,
    beta: f64,
    delta: f64,
}

impl Rls {
    fn fresh_p(d: usize, delta: f64) -> DMatrix<f64> {
        DMatrix::identity(d, d) / delta
    }
}

impl Filter for Rls {
    fn predict(&self, x: &DVector<f64>) -> f64 {
        self.w.dot(x)
    }
    fn update(&mut self, x: &DVector<f64>, err: f64) -> bool {
        let px = &self.p * x;
        let denom = self.beta + x.dot(&px);
        if !(denom > 0.0 && denom.is_finite()) {
            self.p = Rls::fresh_p(x.len(), self.delta);
            return true;
        }
        let k = &px / denom;
        self.w.axpy(err, &k, 1.0);
        // P ← (P − k (Px)ᵀ)/β, kept symmetric
        self.p.ger(-1.0, &k, &px, 1.0);
        self.p /= self.beta;
        let sym = (&self.p + self.p.transpose()) * 0.5;
        self.p = sym;
        let lost = self.p.diagonal().iter().any(|&v| !(v > 0.0 && v.is_finite()));
        if lost {
            self.p = Rls::fresh_p(x.len(), self.delta);
        }
        lost
    }
}

fn run_trial<F: Filter>(spec: &StreamSpec, seed: u64, mut filter: F) -> TrialOutcome {
    let task = &spec.task;
    let d = task.d();
    let mut wrng = stream_rng(seed, WEIGHT_STREAM);
    let mut xrng = stream_rng(seed, INPUT_STREAM);
    let se = task.sigma_e2().sqrt();
    let mut w = standard_normal_vector(&mut wrng, d) * task.sigma_w2().sqrt();
    let mut errors = Vec::with_capacity(spec.length);
    let mut resets = 0;
    for _ in 0..spec.length {
        w = w * task.gamma() + standard_normal_vector(&mut wrng, d) * se;
        let x = task.sample_input(&mut xrng);
        let err = w.dot(&x) - filter.predict(&x);
        if !(err.abs() <= DIVERGENCE_THRESHOLD) {
            return TrialOutcome::Diverged { resets };
        }
        errors.push(err * err);
        // LMS/RLS are written with e = y − ŵᵀx
        if filter.update(&x, err) {
            resets += 1;
        }
    }
    TrialOutcome::Kept { errors, resets }
}

fn aggregate<F, M>(spec: &StreamSpec, trials: usize, seed: u64, make: M) -> Result<StreamResult>
where
    F: Filter,
    M: Fn() -> F + Sync,
{
    if trials < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 trials, got {trials}")));
    }
    let len = spec.length;
    let start = spec.window_start();
    let mut sums = vec![0.0; len];
    let mut tail_means = Vec::with_capacity(trials);
    let mut all_means = Vec::with_capacity(trials);
    let (mut diverged, mut resets_total) = (0, 0);
    for chunk_start in (0..trials).step_by(TRIAL_CHUNK) {
        let chunk_end = (chunk_start + TRIAL_CHUNK).min(trials);
        let outcomes: Vec<TrialOutcome> = (chunk_start..chunk_end)
            .into_par_iter()
            .map(|t| run_trial(spec, child_seed(seed, t as u64), make()))
            .collect();
        for outcome in outcomes {
            match outcome {
                TrialOutcome::Kept { errors, resets } => {
                    resets_total += resets;
                    for (s, e) in sums.iter_mut().zip(&errors) {
                        *s += e;
                    }
                    tail_means.push(crate::rng::pairwise_sum(&errors[start..]) / (len - start) as f64);
                    all_means.push(crate::rng::pairwise_sum(&errors) / len as f64);
                }
                TrialOutcome::Diverged { resets } => {
                    resets_total += resets;
                    diverged += 1;
                }
            }
        }
    }
    let kept = tail_means.len();
    if kept < 2 {
        return Err(Error::Divergence(format!("{diverged} of {trials} trials diverged")));
    }
    let per_step_sq_error = sums.into_iter().map(|s| s / kept as f64).collect();
    let (steady_state_mean, steady_state_stderr) = mean_and_stderr(&tail_means);
    let (all_step_mean, all_step_stderr) = mean_and_stderr(&all_means);
    Ok(StreamResult {
        per_step_sq_error,
        steady_state_mean,
        steady_state_stderr,
        all_step_mean,
        all_step_stderr,
        window_start: start,
        trials: kept,
        diverged,
        reinitializations: resets_total,
    })
}

/// LMS from `ŵ_0 = 0` with update `ŵ ← ŵ + μ x_t e_t`. Trial `k` uses the
/// stream keyed by `child_seed(seed, k)`, so LMS and RLS runs with the same
/// seed see identical data.
pub fn lms_track(spec: &StreamSpec, mu: f64, trials: usize, seed: u64) -> Result<StreamResult> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::InvalidConfig(format!("LMS step size must be nonnegative, got {mu}")));
    }
    let d = spec.task.d();
    aggregate(spec, trials, seed, || Lms { w: DVector::zeros(d), mu })
}

/// Exponentially weighted RLS with forgetting `β` and `P_0 = I/δ`.
pub fn rls_track(spec: &StreamSpec, forgetting: f64, delta: f64, trials: usize, seed: u64) -> Result<StreamResult> {
    if !(forgetting > 0.0 && forgetting <= 1.0) {
        return Err(Error::InvalidConfig(format!("RLS forgetting must lie in (0, 1], got {forgetting}")));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidConfig(format!("RLS delta must be positive, got {delta}")));
    }
    let d = spec.task.d();
    aggregate(spec, trials, seed, || Rls {
        w: DVector::zeros(d),
        p: Rls::fresh_p(d, delta),
        beta: forgetting,
        delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(gamma: f64, se2: f64, length: usize) -> StreamSpec {
        StreamSpec::new(&TaskConfig::isotropic(4, 1, gamma, 1.0, se2).unwrap(), length).unwrap()
    }

    #[test]
    fn window_is_final_fifth() {
        let s = spec(0.9, 0.01, 1000);
        assert_eq!(s.window_start(), 800);
        assert_eq!(spec(0.9, 0.01, 3).window_start(), 2);
    }

    #[test]
    fn lms_converges_on_a_fixed_task() {
        let r = lms_track(&spec(1.0, 0.0, 400), 0.05, 50, 1).unwrap();
        assert!(r.steady_state_mean < 0.1 * r.per_step_sq_error[0]);
        assert!(r.per_step_sq_error.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn zero_step_size_leaves_label_energy() {
        // ŵ stays 0, so the error is y_t² with E[y_t²] = d·σw² when γ=1, σe²=0.
        let r = lms_track(&spec(1.0, 0.0, 50), 0.0, 4000, 2).unwrap();
        assert!((r.all_step_mean - 4.0).abs() < 4.0 * r.all_step_stderr);
    }

    #[test]
    fn rls_solves_a_fixed_task() {
        let r = rls_track(&spec(1.0, 0.0, 200), 1.0, 1e-2, 20, 3).unwrap();
        assert!(r.steady_state_mean < 1e-6, "{}", r.steady_state_mean);
        assert_eq!(r.reinitializations, 0);
    }

    #[test]
    fn lms_with_huge_step_diverges_and_is_counted() {
        let s = spec(0.9, 0.01, 200);
        let r = lms_track(&s, 5.0, 10, 4);
        match r {
            Err(Error::Divergence(_)) => {}
            Ok(res) => assert!(res.diverged > 0),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn reproducible_and_rejects_bad_parameters() {
        let s = spec(0.9, 0.05, 100);
        assert_eq!(lms_track(&s, 0.01, 20, 7).unwrap(), lms_track(&s, 0.01, 20, 7).unwrap());
        assert_eq!(rls_track(&s, 0.98, 1e-2, 20, 7).unwrap(), rls_track(&s, 0.98, 1e-2, 20, 7).unwrap());
        assert!(lms_track(&s, -1.0, 20, 7).is_err());
        assert!(rls_track(&s, 0.0, 1e-2, 20, 7).is_err());
        assert!(rls_track(&s, 1.1, 1e-2, 20, 7).is_err());
        assert!(StreamSpec::new(s.task(), 0).is_err());
    }
}
