//! Gradient-flow integration in reduced coordinates, minibatch training on
//! sampled prompts, and Monte Carlo error estimation.

mod flow;
mod mc;
mod optim;
mod sgd;
mod stack;

pub use flow::{default_flow_step, gradient_flow, init_from_assumption};
pub use mc::{mc_error_estimate, mc_stack_error};
pub use optim::{OptimizerKind, SgdConfig};
pub use sgd::{full_gradient, reduced_gradient, sgd_train, Model, SgdRun};
pub use stack::{stack_gradient, train_stack, StackRun};

use crate::gla::ReducedParams;

/// Time-indexed states of a training run in reduced coordinates.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ReducedParams>,
    /// `L̃ − min L̃` (exact, offset-free).
    pub loss_gaps: Vec<f64>,
    /// `‖u₋₁U11 − D1Λ̃⁻¹‖_F`.
    pub residuals: Vec<f64>,
    /// `u₋₁² − ‖U11‖_F²`.
    pub balancedness_residuals: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn last_state(&self) -> Option<&ReducedParams> {
        self.states.last()
    }

    /// Drops every odd-indexed record.
    fn keep_even(&mut self) {
        fn thin<T>(v: &mut Vec<T>) {
            let mut i = 0;
            v.retain(|_| {
                i += 1;
                i % 2 == 1
            });
        }
        thin(&mut self.times);
        thin(&mut self.states);
        thin(&mut self.loss_gaps);
        thin(&mut self.residuals);
        thin(&mut self.balancedness_residuals);
    }

    fn push(&mut self, t: f64, state: ReducedParams, gap: f64, residual: f64) {
        self.balancedness_residuals.push(state.balancedness());
        self.times.push(t);
        self.states.push(state);
        self.loss_gaps.push(gap);
        self.residuals.push(residual);
    }
}
