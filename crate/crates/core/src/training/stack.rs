use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::optim::Optimizer;
use super::sgd::mean_columns;
use super::SgdConfig;
use crate::error::{Error, Result};
use crate::gla::{stack_streams, GlaParams};
use crate::rng::{child_seed, pairwise_sum};
use crate::task_gen::{sample_prompt, Prompt, TaskConfig};

#[derive(Clone, Debug)]
pub struct StackRun {
    pub layers: Vec<GlaParams>,
    /// Minibatch loss `(1/2B) Σ (ŷ − y)²` before each update.
    pub batch_losses: Vec<f64>,
}

/// Gradients of one layer given `G = ∂ℓ/∂O` for its outputs; also returns
/// `∂ℓ/∂Z` through the layer's (masked) input.
fn layer_backward(p: &GlaParams, z: &DMatrix<f64>, g: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let w = p.width();
    let cols = z.ncols();
    let q = &p.w_kq * z;
    let a = p.w_v.transpose() * g;
    let mut s = DMatrix::zeros(w, w);
    let mut gv = DMatrix::zeros(w, w);
    let mut gkq = DMatrix::zeros(w, w);
    let mut gz = DMatrix::zeros(w, cols);
    for i in 0..cols {
        s *= p.lam;
        s.ger(1.0, &z.column(i), &z.column(i), 1.0);
        let sq = &s * q.column(i);
        let sa = &s * a.column(i);
        gv.ger(1.0, &g.column(i), &sq, 1.0);
        gkq.ger(1.0, &sa, &z.column(i), 1.0);
        gz.set_column(i, &(p.w_kq.transpose() * sa));
    }
    // R_k = a_k q_kᵀ + λ R_{k+1}
    let mut r = DMatrix::zeros(w, w);
    for k in (0..cols).rev() {
        r *= p.lam;
        r.ger(1.0, &a.column(k), &q.column(k), 1.0);
        let zk: DVector<f64> = z.column(k).into_owned();
        let extra = &r * &zk + r.transpose() * &zk;
        let mut col = gz.column_mut(k);
        col += extra;
    }
    (gv, gkq, gz)
}

/// Loss `½(ŷ − y)²` of a residual stack and its gradient for every layer as
/// `(∂/∂W_V, ∂/∂W_KQ)`.
pub fn stack_gradient(layers: &[GlaParams], prompt: &Prompt) -> Result<(f64, Vec<(DMatrix<f64>, DMatrix<f64>)>)> {
    let (inputs, streams) = stack_streams(layers, prompt)?;
    let (d, n) = (prompt.d(), prompt.n());
    let r = streams.last().expect("nonempty")[(d, n)] - prompt.query_label();
    let mut upstream = DMatrix::zeros(d + 1, n + 1);
    upstream[(d, n)] = r;
    let mut grads = Vec::with_capacity(layers.len());
    for (layer, z) in layers.iter().zip(&inputs).rev() {
        let (gv, gkq, mut gz) = layer_backward(layer, z, &upstream);
        gz[(d, n)] = 0.0;
        upstream += gz;
        grads.push((gv, gkq));
    }
    grads.reverse();
    Ok((0.5 * r * r, grads))
}

fn flatten(layers: &[GlaParams]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|p| p.w_v.iter().chain(p.w_kq.iter()).copied())
        .collect()
}

fn unflatten(layers: &mut [GlaParams], v: &[f64]) {
    let mut at = 0;
    for p in layers {
        for m in [&mut p.w_v, &mut p.w_kq] {
            let k = m.len();
            m.as_mut_slice().copy_from_slice(&v[at..at + k]);
            at += k;
        }
    }
}

/// Minibatch training of every entry of every layer; `λ` stays fixed.
pub fn train_stack(init: &[GlaParams], cfg: &TaskConfig, opt: &SgdConfig) -> Result<StackRun> {
    opt.validate()?;
    if init.is_empty() {
        return Err(Error::InvalidConfig("stack needs at least one layer".into()));
    }
    let mut layers = init.to_vec();
    let mut params = flatten(&layers);
    let mut optimizer = Optimizer::new(opt, params.len());
    let mut batch_losses = Vec::with_capacity(opt.steps);
    for step in 0..opt.steps {
        let batch_seed = child_seed(opt.seed, step as u64);
        let per = (0..opt.batch_size as u64)
            .into_par_iter()
            .map(|t| {
                let prompt = sample_prompt(cfg, child_seed(batch_seed, t));
                let (loss, grads) = stack_gradient(&layers, &prompt)?;
                let flat = grads.iter().flat_map(|(gv, gkq)| gv.iter().chain(gkq.iter()).copied()).collect();
                Ok((loss, flat))
            })
            .collect::<Result<Vec<(f64, Vec<f64>)>>>()?;
        let (losses, grads): (Vec<f64>, Vec<Vec<f64>>) = per.into_iter().unzip();
        let loss = pairwise_sum(&losses) / losses.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("stack minibatch loss {loss} at step {step}")));
        }
        batch_losses.push(loss);
        optimizer.step(&mut params, &mean_columns(&grads));
        unflatten(&mut layers, &params);
    }
    Ok(StackRun { layers, batch_losses })
}
