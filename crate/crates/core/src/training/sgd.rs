use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::optim::Optimizer;
use super::{SgdConfig, Trajectory};
use crate::constants::constant_set;
use crate::error::{Error, Result};
use crate::gla::{GlaParams, ReducedParams};
use crate::rng::{child_seed, pairwise_sum};
use crate::task_gen::{sample_prompt, sample_prompt_summary, Prompt, PromptSummary, TaskConfig};
use crate::theory::{population_loss_residual, product_residual};

/// Parameters being trained.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Reduced(ReducedParams),
    /// A full layer; only the bottom row of `W_V` and the first `d` columns
    /// of `W_KQ` receive gradient.
    Full(GlaParams),
}

impl Model {
    /// `(W_KQ[:d, :d], W_V[d, d])` for a full layer.
    pub fn reduced_projection(&self) -> ReducedParams {
        match self {
            Model::Reduced(rp) => rp.clone(),
            Model::Full(p) => {
                let d = p.width() - 1;
                ReducedParams {
                    u11: p.w_kq.view((0, 0), (d, d)).into_owned(),
                    u_neg1: p.w_v[(d, d)],
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SgdRun {
    /// One entry per step (`t` = number of updates so far). For full layers
    /// the states and gaps are those of the reduced projection.
    pub trajectory: Trajectory,
    /// Minibatch loss `(1/2B) Σ (ŷ − y)²` before each update.
    pub batch_losses: Vec<f64>,
    pub model: Model,
}

/// Loss `½(ŷ − y)²` and its gradient in `(U11, u₋₁)` for one prompt.
pub fn reduced_gradient(rp: &ReducedParams, s: &PromptSummary) -> (f64, DMatrix<f64>, f64) {
    let ux = &rp.u11 * &s.query;
    let hux = s.h.dot(&ux);
    let r = rp.u_neg1 * hux - s.label;
    let gu = &s.h * s.query.transpose() * (r * rp.u_neg1);
    (0.5 * r * r, gu, r * hux)
}

/// Loss `½(ŷ − y)²` and its gradient in `(W_V, W_KQ)` for one prompt.
pub fn full_gradient(params: &GlaParams, prompt: &Prompt) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let w = params.width();
    let z = prompt.tokens();
    if z.nrows() != w {
        return Err(Error::DimensionMismatch {
            what: "token dimension",
            expected: w,
            got: z.nrows(),
        });
    }
    let d = w - 1;
    let n = prompt.n();
    let x = prompt.query();
    let a = params.w_v.row(d).transpose();
    let bx = params.w_kq.columns(0, d) * &x;
    // M a and M B x with M = Σ_{i≤n+1} λ^{n+1−i} z_i z_iᵀ (query label masked)
    let mut ma = DVector::zeros(w);
    let mut mbx = DVector::zeros(w);
    for i in 0..=n {
        ma *= params.lam;
        mbx *= params.lam;
        let mut zi = z.column(i).into_owned();
        if i == n {
            zi[d] = 0.0;
        }
        ma.axpy(zi.dot(&a), &zi, 1.0);
        mbx.axpy(zi.dot(&bx), &zi, 1.0);
    }
    let r = a.dot(&mbx) - prompt.query_label();
    let mut gv = DMatrix::zeros(w, w);
    gv.row_mut(d).copy_from(&(mbx * r).transpose());
    let mut gkq = DMatrix::zeros(w, w);
    gkq.columns_mut(0, d).copy_from(&(ma * x.transpose() * r));
    Ok((0.5 * r * r, gv, gkq))
}

fn flatten(model: &Model) -> Vec<f64> {
    match model {
        Model::Reduced(rp) => {
            let mut v = rp.u11.as_slice().to_vec();
            v.push(rp.u_neg1);
            v
        }
        Model::Full(p) => p.w_v.as_slice().iter().chain(p.w_kq.as_slice()).copied().collect(),
    }
}

fn unflatten(model: &mut Model, v: &[f64]) {
    match model {
        Model::Reduced(rp) => {
            let k = rp.u11.len();
            rp.u11.as_mut_slice().copy_from_slice(&v[..k]);
            rp.u_neg1 = v[k];
        }
        Model::Full(p) => {
            let k = p.w_v.len();
            p.w_v.as_mut_slice().copy_from_slice(&v[..k]);
            p.w_kq.as_mut_slice().copy_from_slice(&v[k..]);
        }
    }
}

/// Per-prompt losses and flat gradients for one minibatch.
fn batch(model: &Model, cfg: &TaskConfig, lam: f64, batch_seed: u64, size: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let per: Vec<Result<(f64, Vec<f64>)>> = (0..size as u64)
        .into_par_iter()
        .map(|t| {
            let seed = child_seed(batch_seed, t);
            match model {
                Model::Reduced(rp) => {
                    let s = sample_prompt_summary(cfg, lam, seed);
                    let (loss, gu, gs) = reduced_gradient(rp, &s);
                    let mut g = gu.as_slice().to_vec();
                    g.push(gs);
                    Ok((loss, g))
                }
                Model::Full(p) => {
                    let prompt = sample_prompt(cfg, seed);
                    let (loss, gv, gkq) = full_gradient(p, &prompt)?;
                    Ok((loss, gv.as_slice().iter().chain(gkq.as_slice()).copied().collect()))
                }
            }
        })
        .collect();
    let mut losses = Vec::with_capacity(size);
    let mut grads = Vec::with_capacity(size);
    for r in per {
        let (l, g) = r?;
        losses.push(l);
        grads.push(g);
    }
    Ok((losses, grads))
}

/// Mean of per-sample vectors, coordinate-wise pairwise sums.
pub(crate) fn mean_columns(grads: &[Vec<f64>]) -> Vec<f64> {
    let len = grads.first().map_or(0, Vec::len);
    let count = grads.len() as f64;
    let mut col = vec![0.0; grads.len()];
    (0..len)
        .map(|k| {
            for (c, g) in col.iter_mut().zip(grads) {
                *c = g[k];
            }
            pairwise_sum(&col) / count
        })
        .collect()
}

/// Minibatch training on fresh prompts each step.
pub fn sgd_train(init: &Model, cfg: &TaskConfig, lam: f64, opt: &SgdConfig) -> Result<SgdRun> {
    opt.validate()?;
    let cs = constant_set(cfg, lam)?;
    let d = cfg.d();
    let shape_ok = match init {
        Model::Reduced(rp) => rp.d() == d,
        Model::Full(p) => p.width() == d + 1 && (p.lam - lam).abs() == 0.0,
    };
    if !shape_ok {
        return Err(Error::InvalidConfig("initial model does not match the task dimension or lambda".into()));
    }
    let mut model = init.clone();
    let mut params = flatten(&model);
    let mut optimizer = Optimizer::new(opt, params.len());
    let mut trajectory = Trajectory::default();
    let mut batch_losses = Vec::with_capacity(opt.steps);
    let record = |traj: &mut Trajectory, t: f64, model: &Model| -> Result<()> {
        let rp = model.reduced_projection();
        let gap = population_loss_residual(&rp, &cs)?;
        let res = product_residual(&rp, &cs)?;
        traj.push(t, rp, gap, res);
        Ok(())
    };
    record(&mut trajectory, 0.0, &model)?;
    for step in 0..opt.steps {
        let (losses, grads) = batch(&model, cfg, lam, child_seed(opt.seed, step as u64), opt.batch_size)?;
        let loss = pairwise_sum(&losses) / losses.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("minibatch loss {loss} at step {step}")));
        }
        batch_losses.push(loss);
        let g = mean_columns(&grads);
        optimizer.step(&mut params, &g);
        unflatten(&mut model, &params);
        record(&mut trajectory, (step + 1) as f64, &model)?;
    }
    Ok(SgdRun {
        trajectory,
        batch_losses,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gla::predict;
    use crate::theory::closed_form_optimum;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn reduced_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TaskConfig::isotropic(3, 12, 0.9, 1.0, 0.05).unwrap();
        let s = sample_prompt_summary(&cfg, 0.85, 4);
        let rp = ReducedParams::new(DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.5..0.5)), 0.7).unwrap();
        let loss = |rp: &ReducedParams| reduced_gradient(rp, &s).0;
        let (_, gu, gs) = reduced_gradient(&rp, &s);
        let h = 1e-6;
        for k in 0..9 {
            let (mut p, mut m) = (rp.clone(), rp.clone());
            p.u11.as_mut_slice()[k] += h;
            m.u11.as_mut_slice()[k] -= h;
            assert!(rel_close((loss(&p) - loss(&m)) / (2.0 * h), gu.as_slice()[k], 1e-5));
        }
        let (mut p, mut m) = (rp.clone(), rp.clone());
        p.u_neg1 += h;
        m.u_neg1 -= h;
        assert!(rel_close((loss(&p) - loss(&m)) / (2.0 * h), gs, 1e-5));
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = TaskConfig::isotropic(2, 6, 0.9, 1.0, 0.05).unwrap();
        let prompt = sample_prompt(&cfg, 3);
        let p = GlaParams::new(
            DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.5..0.5)),
            DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.5..0.5)),
            0.8,
        )
        .unwrap();
        let loss = |p: &GlaParams| 0.5 * (predict(p, &prompt).unwrap() - prompt.query_label()).powi(2);
        let (l0, gv, gkq) = full_gradient(&p, &prompt).unwrap();
        assert!(rel_close(l0, loss(&p), 1e-12));
        let h = 1e-6;
        for k in 0..9 {
            for which in 0..2 {
                let (mut a, mut b) = (p.clone(), p.clone());
                let (ma, mb, g) = if which == 0 {
                    (&mut a.w_v, &mut b.w_v, &gv)
                } else {
                    (&mut a.w_kq, &mut b.w_kq, &gkq)
                };
                ma.as_mut_slice()[k] += h;
                mb.as_mut_slice()[k] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - g.as_slice()[k]).abs() <= 1e-5 * fd.abs().max(g.as_slice()[k].abs()).max(1e-6));
            }
        }
    }

    #[test]
    fn zero_step_size_keeps_params() {
        let cfg = TaskConfig::isotropic(2, 5, 0.9, 1.0, 0.05).unwrap();
        let init = Model::Reduced(ReducedParams::new(DMatrix::identity(2, 2) * 0.1, 0.2).unwrap());
        let opt = SgdConfig {
            batch_size: 8,
            step_size: 0.0,
            steps: 3,
            ..SgdConfig::default()
        };
        let run = sgd_train(&init, &cfg, 0.9, &opt).unwrap();
        assert_eq!(run.model, init);
        assert_eq!(run.trajectory.len(), 4);
        assert_eq!(run.batch_losses.len(), 3);
    }

    #[test]
    fn training_decreases_gap() {
        let cfg = TaskConfig::isotropic(2, 10, 0.9, 1.0, 0.05).unwrap();
        let cs = constant_set(&cfg, 0.8).unwrap();
        let opt_rp = closed_form_optimum(&cs).unwrap();
        let init = Model::Reduced(ReducedParams::new(&opt_rp.u11 * 0.3, opt_rp.u_neg1 * 0.3).unwrap());
        let opt = SgdConfig {
            batch_size: 256,
            step_size: 0.05,
            steps: 60,
            seed: 5,
            ..SgdConfig::default()
        };
        let run = sgd_train(&init, &cfg, 0.8, &opt).unwrap();
        let gaps = &run.trajectory.loss_gaps;
        assert!(gaps[gaps.len() - 1] < 0.1 * gaps[0]);
    }

    #[test]
    fn full_gradient_restricts_to_reduced_gradient_at_embedding() {
        let cfg = TaskConfig::isotropic(3, 8, 0.9, 1.0, 0.05).unwrap();
        let rp = ReducedParams::new(DMatrix::from_fn(3, 3, |i, j| 0.1 * (i as f64) - 0.05 * (j as f64) + 0.2), 0.6).unwrap();
        for seed in 0..4 {
            let prompt = sample_prompt(&cfg, seed);
            let s = sample_prompt_summary(&cfg, 0.8, seed);
            let (lr, gu, gs) = reduced_gradient(&rp, &s);
            let (lf, gv, gkq) = full_gradient(&rp.embed(0.8), &prompt).unwrap();
            assert!((lr - lf).abs() < 1e-12 * lr.max(1.0));
            assert!((gkq.view((0, 0), (3, 3)) - &gu).amax() < 1e-12);
            assert!((gv[(3, 3)] - gs).abs() < 1e-12);
        }
    }
}
