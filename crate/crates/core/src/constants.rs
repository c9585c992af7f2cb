//! The scalars `D1..D4` and the effective covariance
//! `Λ̃ = D2(2Λ + tr(Λ)I) + D3Λ`.
//!
//! With `c(a, b)` the weight cross-covariance,
//!
//! ```text
//! D1 = Σ_{i=1}^{n} λ^{n+1−i} c(n+1, i)
//! D2 = Σ_{a=1}^{n} λ^{2n+2−2a} c(a, a)
//! D3 = 2 Σ_{b<a≤n} λ^{2n+2−a−b} c(a, b)
//! D4 = c(n+1, n+1)
//! ```
//!
//! Each has a direct-summation form (`*_direct`, exact for every `(λ, γ)`) and
//! a closed form (`*_closed`) that dispatches over the loci where the generic
//! expression is singular.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::task_gen::{TaskConfig, GAMMA_ONE_TOL};

/// Distance below which a parameter pair is treated as lying on a locus.
pub const BRANCH_TOL: f64 = 1e-9;

/// Context lengths up to this use direct sums in [`constant_set`].
pub const DIRECT_SUM_MAX_N: usize = 256;

/// Which closed form applies to `(λ, γ)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// `λ = γ = 1`
    Stationary,
    /// `λ = 1`, `γ ≠ 1`
    NoForgetting,
    /// `γ = 1`, `λ ≠ 1`
    RandomWalk,
    /// `λ = γ ≠ 1`
    Matched,
    /// `λγ = 1`, `λ ≠ 1`
    Reciprocal,
    Generic,
}

impl Branch {
    pub fn classify(lam: f64, gamma: f64) -> Self {
        let lam_one = (lam - 1.0).abs() < BRANCH_TOL;
        let gamma_one = (gamma - 1.0).abs() < BRANCH_TOL;
        if lam_one && gamma_one {
            Branch::Stationary
        } else if lam_one {
            Branch::NoForgetting
        } else if gamma_one {
            Branch::RandomWalk
        } else if (lam - gamma).abs() < BRANCH_TOL {
            Branch::Matched
        } else if (lam * gamma - 1.0).abs() < BRANCH_TOL {
            Branch::Reciprocal
        } else {
            Branch::Generic
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels. Differences such as `r − 1` are passed in explicitly so callers can
// form them without cancellation.

/// `r^k − 1` given `r − 1`.
fn pow_m1(r_minus_1: f64, k: usize) -> f64 {
    (k as f64 * r_minus_1.ln_1p()).exp_m1()
}

/// `Σ_{j=1}^{k} r^j`, `r ≠ 1`.
fn geom(r: f64, r_minus_1: f64, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    r * pow_m1(r_minus_1, k) / r_minus_1
}

/// `Σ_{j=1}^{k} (k+1−j) r^j = r(k − Σ_{j≤k} r^j)/(1 − r)`, `r ≠ 1`.
fn ramp(r: f64, r_minus_1: f64, k: usize) -> f64 {
    -r * (k as f64 - geom(r, r_minus_1, k)) / r_minus_1
}

/// `Σ_{j=1}^{k} a^j b^{k−j}`, `a ≠ b`, both positive. Scaled by the larger
/// base so that neither power overflows on its own.
fn mixed(a: f64, b: f64, a_minus_b: f64, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let kf = k as f64;
    if a >= b {
        // a(a^k − b^k)/(a − b) = a^{k+1}(1 − (b/a)^k)/(a − b)
        -a.powf(kf + 1.0) * pow_m1(-a_minus_b / a, k) / a_minus_b
    } else {
        a * b.powf(kf) * pow_m1(a_minus_b / b, k) / a_minus_b
    }
}

/// Split `c(a, b) = A γ^{a+b} + B γ^{|a−b|}` for `γ ≠ 1`.
fn drift_split(gamma: f64, sw2: f64, se2: f64) -> (f64, f64) {
    let b = se2 / ((1.0 - gamma) * (1.0 + gamma));
    (sw2 - b, b)
}

// Taylor coefficients at the stationary corner. Entry `[m][k]` holds the
// coefficient of `δ^m` in `D(k+1)` as a pair of polynomials in `n`
// (ascending powers), multiplying `σ_w²` and `σ_e²`. Used where the closed
// forms for `γ = 1` (with `λ = 1 + δ`) and `λ = 1` (with `γ = 1 + δ`) lose
// accuracy to cancellation.

type SeriesTerm = (&'static [f64], &'static [f64]);

#[rustfmt::skip]
const RANDOM_WALK_SERIES: [[SeriesTerm; 3]; 4] = [
    [(&[0.0, 1.0], &[0.0, 1.0 / 2.0, 1.0 / 2.0]), (&[0.0, 1.0], &[0.0, 1.0 / 2.0, 1.0 / 2.0]), (&[0.0, -1.0, 1.0], &[0.0, -1.0 / 3.0, 0.0, 1.0 / 3.0])],
    [(&[0.0, 1.0 / 2.0, 1.0 / 2.0], &[0.0, 1.0 / 3.0, 1.0 / 2.0, 1.0 / 6.0]), (&[0.0, 1.0, 1.0], &[0.0, 2.0 / 3.0, 1.0, 1.0 / 3.0]), (&[0.0, -1.0, 0.0, 1.0], &[0.0, -1.0 / 2.0, -1.0 / 4.0, 1.0 / 2.0, 1.0 / 4.0])],
    [(&[0.0, -1.0 / 6.0, 0.0, 1.0 / 6.0], &[0.0, -1.0 / 12.0, -1.0 / 24.0, 1.0 / 12.0, 1.0 / 24.0]), (&[0.0, -1.0 / 6.0, 1.0 / 2.0, 2.0 / 3.0], &[0.0, 0.0, 1.0 / 3.0, 1.0 / 2.0, 1.0 / 6.0]), (&[0.0, 1.0 / 6.0, -7.0 / 12.0, -1.0 / 6.0, 7.0 / 12.0], &[0.0, -1.0 / 30.0, -1.0 / 4.0, -1.0 / 12.0, 1.0 / 4.0, 7.0 / 60.0])],
    [(&[0.0, 1.0 / 12.0, -1.0 / 24.0, -1.0 / 12.0, 1.0 / 24.0], &[0.0, 1.0 / 30.0, 0.0, -1.0 / 24.0, 0.0, 1.0 / 120.0]), (&[0.0, 0.0, -1.0 / 3.0, 0.0, 1.0 / 3.0], &[0.0, -1.0 / 15.0, -1.0 / 6.0, 0.0, 1.0 / 6.0, 1.0 / 15.0]), (&[0.0, 0.0, 1.0 / 3.0, -1.0 / 4.0, -1.0 / 3.0, 1.0 / 4.0], &[0.0, 1.0 / 15.0, 1.0 / 12.0, -1.0 / 8.0, -1.0 / 8.0, 7.0 / 120.0, 1.0 / 24.0])],
];

#[rustfmt::skip]
const NO_FORGETTING_SERIES: [[SeriesTerm; 3]; 4] = [
    [(&[0.0, 1.0], &[0.0, 1.0 / 2.0, 1.0 / 2.0]), (&[0.0, 1.0], &[0.0, 1.0 / 2.0, 1.0 / 2.0]), (&[0.0, -1.0, 1.0], &[0.0, -1.0 / 3.0, 0.0, 1.0 / 3.0])],
    [(&[0.0, 3.0 / 2.0, 3.0 / 2.0], &[0.0, 0.0, 1.0 / 2.0, 1.0 / 2.0]), (&[0.0, 1.0, 1.0], &[0.0, -1.0 / 3.0, 0.0, 1.0 / 3.0]), (&[0.0, -1.0, 0.0, 1.0], &[0.0, 1.0 / 6.0, -1.0 / 4.0, -1.0 / 6.0, 1.0 / 4.0])],
    [(&[0.0, 1.0 / 3.0, 3.0 / 2.0, 7.0 / 6.0], &[0.0, -1.0 / 12.0, -7.0 / 24.0, 1.0 / 12.0, 7.0 / 24.0]), (&[0.0, -1.0 / 6.0, 1.0 / 2.0, 2.0 / 3.0], &[0.0, 1.0 / 6.0, -1.0 / 6.0, -1.0 / 6.0, 1.0 / 6.0]), (&[0.0, 1.0 / 6.0, -7.0 / 12.0, -1.0 / 6.0, 7.0 / 12.0], &[0.0, -1.0 / 30.0, 1.0 / 4.0, -1.0 / 12.0, -1.0 / 4.0, 7.0 / 60.0])],
    [(&[0.0, -1.0 / 12.0, -1.0 / 8.0, 7.0 / 12.0, 5.0 / 8.0], &[0.0, 1.0 / 12.0, 1.0 / 8.0, -5.0 / 24.0, -1.0 / 8.0, 1.0 / 8.0]), (&[0.0, 0.0, -1.0 / 3.0, 0.0, 1.0 / 3.0], &[0.0, -1.0 / 15.0, 1.0 / 6.0, 0.0, -1.0 / 6.0, 1.0 / 15.0]), (&[0.0, 0.0, 1.0 / 3.0, -1.0 / 4.0, -1.0 / 3.0, 1.0 / 4.0], &[0.0, -1.0 / 30.0, -1.0 / 6.0, 5.0 / 24.0, 1.0 / 8.0, -7.0 / 40.0, 1.0 / 24.0])],
];

/// Series are used while `|δ|·(2n+2)` stays below this.
const SERIES_RADIUS: f64 = 1e-3;

fn horner(coefs: &[f64], x: f64) -> f64 {
    coefs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn corner_series(table: &[[SeriesTerm; 3]; 4], delta: f64, sw2: f64, se2: f64, nf: f64) -> Triple {
    let mut d = [0.0; 3];
    for (k, slot) in d.iter_mut().enumerate() {
        *slot = table
            .iter()
            .rev()
            .fold(0.0, |acc, row| acc * delta + sw2 * horner(row[k].0, nf) + se2 * horner(row[k].1, nf));
    }
    Triple { d1: d[0], d2: d[1], d3: d[2] }
}

fn in_series_range(delta: f64, n: usize) -> bool {
    delta.abs() * (2 * n + 2) as f64 <= SERIES_RADIUS
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Triple {
    d1: f64,
    d2: f64,
    d3: f64,
}

fn closed_triple(cfg: &TaskConfig, lam: f64) -> Triple {
    closed_triple_raw(lam, cfg.gamma(), cfg.sigma_w2(), cfg.sigma_e2(), cfg.n())
}

fn closed_triple_raw(lam: f64, gamma: f64, sw2: f64, se2: f64, n: usize) -> Triple {
    let nf = n as f64;
    let t = branch_triple(lam, gamma, sw2, se2, n, nf);
    // A single context pair has no off-diagonal terms.
    if n == 1 {
        Triple { d3: 0.0, ..t }
    } else {
        t
    }
}

fn branch_triple(lam: f64, gamma: f64, sw2: f64, se2: f64, n: usize, nf: f64) -> Triple {
    match Branch::classify(lam, gamma) {
        Branch::Stationary => {
            let d1 = nf * sw2 + nf * (nf + 1.0) / 2.0 * se2;
            Triple {
                d1,
                d2: d1,
                d3: nf * (nf - 1.0) * sw2 + nf * (nf - 1.0) * (nf + 1.0) / 3.0 * se2,
            }
        }
        Branch::RandomWalk if in_series_range(lam - 1.0, n) => {
            corner_series(&RANDOM_WALK_SERIES, lam - 1.0, sw2, se2, nf)
        }
        Branch::NoForgetting if in_series_range(gamma - 1.0, n) => {
            corner_series(&NO_FORGETTING_SERIES, gamma - 1.0, sw2, se2, nf)
        }
        Branch::RandomWalk => {
            // c(a, b) = σ_w² + min(a, b)σ_e²
            let lm1 = lam - 1.0;
            let l2 = lam * lam;
            let l2m1 = lm1 * (lam + 1.0);
            let g1 = geom(lam, lm1, n);
            let g2 = geom(l2, l2m1, n);
            let k1 = ramp(lam, lm1, n);
            let k2 = ramp(l2, l2m1, n);
            Triple {
                d1: sw2 * g1 + se2 * k1,
                d2: sw2 * g2 + se2 * k2,
                d3: sw2 * (g1 * g1 - g2) + 2.0 * se2 * (lam * k1 - k2) / (1.0 - lam),
            }
        }
        Branch::NoForgetting => {
            let (a, b) = drift_split(gamma, sw2, se2);
            let gm1 = gamma - 1.0;
            let one_minus_g2 = (1.0 - gamma) * (1.0 + gamma);
            let e1 = mixed(1.0, gamma, -gm1, n);
            let e2 = mixed(1.0, gamma * gamma, one_minus_g2, n);
            let tail = if n > 1 {
                gamma / (1.0 - gamma) * ((nf - 1.0) - gamma * mixed(1.0, gamma, -gm1, n - 1))
            } else {
                0.0
            };
            Triple {
                d1: a * gamma.powf(nf + 2.0) * e1 + b * geom(gamma, gm1, n),
                d2: a * gamma * gamma * e2 + b * nf,
                d3: a * gamma * gamma * (e1 * e1 - e2) + 2.0 * b * tail,
            }
        }
        Branch::Matched => {
            let g = lam;
            let (a, b) = drift_split(g, sw2, se2);
            let l2 = lam * lam;
            let l2m1 = (lam - 1.0) * (lam + 1.0);
            let top = l2.powf(nf + 1.0);
            let d1 = a * nf * top + b * geom(l2, l2m1, n);
            let tail = l2 / (-l2m1) * (geom(l2, l2m1, n - 1) - (nf - 1.0) * l2.powf(nf));
            Triple {
                d1,
                d2: d1,
                d3: a * nf * (nf - 1.0) * top + 2.0 * b * tail,
            }
        }
        Branch::Reciprocal => {
            let g = 1.0 / lam;
            let (a, b) = drift_split(g, sw2, se2);
            let l2 = lam * lam;
            let l2m1 = (lam - 1.0) * (lam + 1.0);
            let e1 = mixed(lam, g, lam - g, n);
            let e2 = mixed(l2, g * g, (lam - g) * (lam + g), n);
            let tail = if n > 1 { ramp(l2, l2m1, n - 1) } else { 0.0 };
            Triple {
                d1: a * g.powf(nf + 2.0) * e1 + b * nf,
                d2: a * g * g * e2 + b * geom(l2, l2m1, n),
                d3: a * g * g * (e1 * e1 - e2) + 2.0 * b * tail,
            }
        }
        Branch::Generic => {
            let (a, b) = drift_split(gamma, sw2, se2);
            let s = lam * gamma;
            let sm1 = lam.mul_add(gamma, -1.0);
            let l2 = lam * lam;
            let l2m1 = (lam - 1.0) * (lam + 1.0);
            let e1 = mixed(lam, gamma, lam - gamma, n);
            let e2 = mixed(l2, gamma * gamma, (lam - gamma) * (lam + gamma), n);
            // Σ_{p<q≤n} λ^{p+q} γ^{q−p}
            let tail = if n > 1 {
                s / (-sm1) * (geom(l2, l2m1, n - 1) - s * mixed(l2, s, lam * (lam - gamma), n - 1))
            } else {
                0.0
            };
            Triple {
                d1: a * gamma.powf(nf + 2.0) * e1 + b * geom(s, sm1, n),
                d2: a * gamma * gamma * e2 + b * geom(l2, l2m1, n),
                d3: a * gamma * gamma * (e1 * e1 - e2) + 2.0 * b * tail,
            }
        }
    }
}

pub fn d1_closed(cfg: &TaskConfig, lam: f64) -> f64 {
    closed_triple(cfg, lam).d1
}
pub fn d2_closed(cfg: &TaskConfig, lam: f64) -> f64 {
    closed_triple(cfg, lam).d2
}
pub fn d3_closed(cfg: &TaskConfig, lam: f64) -> f64 {
    closed_triple(cfg, lam).d3
}

/// `c(n+1, n+1)`, the second moment of each coordinate of the query weight.
pub fn d4_closed(cfg: &TaskConfig) -> f64 {
    let (gamma, sw2, se2) = (cfg.gamma(), cfg.sigma_w2(), cfg.sigma_e2());
    let k = cfg.n() + 1;
    if (gamma - 1.0).abs() < GAMMA_ONE_TOL {
        return sw2 + k as f64 * se2;
    }
    let g2m1 = (gamma - 1.0) * (gamma + 1.0);
    gamma.powf(2.0 * k as f64) * sw2 + pow_m1(g2m1, k) / g2m1 * se2
}

// ---------------------------------------------------------------------------
// Direct sums.

/// Power tables for evaluating `λ^k` and `c(a, b)` inside the double sums.
struct SumTables {
    lam_pow: Vec<f64>,
    gamma_pow: Vec<f64>,
    /// `((γ²)^k − 1)/(γ² − 1)`, or `k` when `γ = 1`.
    drift: Vec<f64>,
    random_walk: bool,
    sw2: f64,
    se2: f64,
}

impl SumTables {
    fn new(cfg: &TaskConfig, lam: f64) -> Self {
        let top = 2 * cfg.n() + 2;
        let gamma = cfg.gamma();
        let random_walk = (gamma - 1.0).abs() < GAMMA_ONE_TOL;
        let g2m1 = (gamma - 1.0) * (gamma + 1.0);
        Self {
            lam_pow: (0..=top).map(|k| lam.powf(k as f64)).collect(),
            gamma_pow: (0..=top).map(|k| gamma.powf(k as f64)).collect(),
            drift: (0..=cfg.n() + 1)
                .map(|k| if random_walk { k as f64 } else { pow_m1(g2m1, k) / g2m1 })
                .collect(),
            random_walk,
            sw2: cfg.sigma_w2(),
            se2: cfg.sigma_e2(),
        }
    }

    /// Same value as `weight_cross_covariance`, from the tables.
    fn cov(&self, a: usize, b: usize) -> f64 {
        let lo = a.min(b);
        if self.random_walk {
            self.sw2 + lo as f64 * self.se2
        } else {
            self.gamma_pow[a + b] * self.sw2 + self.gamma_pow[a.abs_diff(b)] * self.drift[lo] * self.se2
        }
    }
}

/// Compensated running sum.
#[derive(Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }
    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn d1_direct(cfg: &TaskConfig, lam: f64) -> f64 {
    let t = SumTables::new(cfg, lam);
    let n = cfg.n();
    let mut acc = Neumaier::default();
    for i in 1..=n {
        acc.add(t.lam_pow[n + 1 - i] * t.cov(n + 1, i));
    }
    acc.value()
}

pub fn d2_direct(cfg: &TaskConfig, lam: f64) -> f64 {
    let t = SumTables::new(cfg, lam);
    let n = cfg.n();
    let mut acc = Neumaier::default();
    for a in 1..=n {
        acc.add(t.lam_pow[2 * n + 2 - 2 * a] * t.cov(a, a));
    }
    acc.value()
}

pub fn d3_direct(cfg: &TaskConfig, lam: f64) -> f64 {
    let t = SumTables::new(cfg, lam);
    let n = cfg.n();
    let mut acc = Neumaier::default();
    for b in 1..n {
        for a in b + 1..=n {
            acc.add(t.lam_pow[2 * n + 2 - a - b] * t.cov(a, b));
        }
    }
    2.0 * acc.value()
}

// ---------------------------------------------------------------------------

/// `D1..D3` as used by the public API: direct sums up to
/// [`DIRECT_SUM_MAX_N`], closed forms beyond.
fn triple(cfg: &TaskConfig, lam: f64) -> Triple {
    if cfg.n() <= DIRECT_SUM_MAX_N {
        let direct = Triple {
            d1: d1_direct(cfg, lam),
            d2: d2_direct(cfg, lam),
            d3: d3_direct(cfg, lam),
        };
        #[cfg(debug_assertions)]
        debug_check_closed(cfg, lam, &direct);
        direct
    } else {
        closed_triple(cfg, lam)
    }
}

#[cfg(debug_assertions)]
fn debug_check_closed(cfg: &TaskConfig, lam: f64, direct: &Triple) {
    // Closed forms lose accuracy close to (but off) a locus.
    let g = cfg.gamma();
    let margin = [(lam - 1.0).abs(), (g - 1.0).abs(), (lam - g).abs(), (lam * g - 1.0).abs()]
        .into_iter()
        .filter(|&m| m >= BRANCH_TOL)
        .fold(f64::INFINITY, f64::min);
    if margin < 1e-3 {
        return;
    }
    let closed = closed_triple(cfg, lam);
    for (c, d) in [(closed.d1, direct.d1), (closed.d2, direct.d2), (closed.d3, direct.d3)] {
        let scale = d.abs().max(1e-300);
        debug_assert!(
            ((c - d) / scale).abs() < 1e-6 || !d.is_finite(),
            "closed form {c} disagrees with direct sum {d} at lam={lam}, gamma={g}"
        );
    }
}

fn effective_from(lambda_cov: &DMatrix<f64>, d2: f64, d3: f64) -> DMatrix<f64> {
    let d = lambda_cov.nrows();
    let tr = lambda_cov.trace();
    let m = lambda_cov * (2.0 * d2 + d3) + DMatrix::identity(d, d) * (d2 * tr);
    linalg::symmetrize(m)
}

fn check_lam(lam: f64) -> Result<()> {
    if lam > 0.0 && lam.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("forgetting factor must be positive, got {lam}")))
    }
}

/// `Λ̃ = D2(2Λ + tr(Λ)I) + D3Λ`.
pub fn effective_covariance(cfg: &TaskConfig, lam: f64) -> Result<DMatrix<f64>> {
    check_lam(lam)?;
    let t = triple(cfg, lam);
    let m = effective_from(cfg.lambda_cov(), t.d2, t.d3);
    linalg::spd_eigen(&m, "effective covariance")?;
    Ok(m)
}

/// `D1..D4` and `Λ̃` for one `(TaskConfig, λ)`.
#[derive(Clone, Debug)]
pub struct ConstantSet {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    pub lambda_tilde: DMatrix<f64>,
    pub lam: f64,
    pub cfg: TaskConfig,
}

impl ConstantSet {
    /// All of `D1..D4` vanish (no task signal at all).
    pub fn is_degenerate(&self) -> bool {
        self.d1 == 0.0 && self.d2 == 0.0 && self.d3 == 0.0 && self.d4 == 0.0
    }
    pub fn d(&self) -> usize {
        self.cfg.d()
    }
    pub fn lambda_cov(&self) -> &DMatrix<f64> {
        self.cfg.lambda_cov()
    }
}

pub fn constant_set(cfg: &TaskConfig, lam: f64) -> Result<ConstantSet> {
    check_lam(lam)?;
    let t = triple(cfg, lam);
    let d4 = d4_closed(cfg);
    for (name, v) in [("D1", t.d1), ("D2", t.d2), ("D3", t.d3), ("D4", d4)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v} at lam={lam}")));
        }
    }
    let lambda_tilde = effective_from(cfg.lambda_cov(), t.d2, t.d3);
    if t.d2 > 0.0 && t.d3 >= 0.0 {
        linalg::spd_eigen(&lambda_tilde, "effective covariance")?;
    }
    Ok(ConstantSet {
        d1: t.d1,
        d2: t.d2,
        d3: t.d3,
        d4,
        lambda_tilde,
        lam,
        cfg: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, gamma: f64, sw2: f64, se2: f64) -> TaskConfig {
        TaskConfig::isotropic(2, n, gamma, sw2, se2).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn classify_order() {
        assert_eq!(Branch::classify(1.0, 1.0), Branch::Stationary);
        assert_eq!(Branch::classify(1.0, 0.5), Branch::NoForgetting);
        assert_eq!(Branch::classify(0.5, 1.0), Branch::RandomWalk);
        assert_eq!(Branch::classify(0.5, 0.5 + 1e-10), Branch::Matched);
        assert_eq!(Branch::classify(2.0, 0.5), Branch::Reciprocal);
        assert_eq!(Branch::classify(0.5, 0.6), Branch::Generic);
    }

    #[test]
    fn stationary_hand_values() {
        assert_eq!(d1_closed(&cfg(3, 1.0, 1.0, 1.0), 1.0), 9.0);
        assert_eq!(d1_closed(&cfg(5, 1.0, 2.0, 0.0), 1.0), 10.0);
        assert!(rel(d1_direct(&cfg(7, 1.0, 1.3, 0.4), 1.0), 7.0 * 1.3 + 28.0 * 0.4) < 1e-15);
        assert_eq!(d3_direct(&cfg(1, 0.7, 1.0, 1.0), 0.9), 0.0);
        assert_eq!(d3_closed(&cfg(1, 0.7, 1.0, 1.0), 0.9), 0.0);
        let c = cfg(6, 1.0, 1.5, 0.0);
        assert_eq!(d2_closed(&c, 1.0), 9.0);
        assert_eq!(d3_closed(&c, 1.0), 45.0);
        assert_eq!(d4_closed(&c), 1.5);
    }

    #[test]
    fn d4_values() {
        assert_eq!(d4_closed(&cfg(4, 1.0, 1.0, 0.5)), 3.5);
        assert!(rel(d4_closed(&cfg(4, 1e-6, 1.0, 0.25)), 0.25) < 1e-11);
        let c = cfg(30, 0.9, 1.0, 0.01);
        assert!(rel(d4_closed(&c), crate::task_gen::weight_cross_covariance(&c, 31, 31)) < 1e-14);
    }

    #[test]
    fn closed_matches_direct_on_examples() {
        let c = TaskConfig::isotropic(3, 100, 0.95, 1.0, 0.01).unwrap();
        assert!(rel(d1_closed(&c, 0.9), d1_direct(&c, 0.9)) < 1e-10);
        let c = TaskConfig::isotropic(3, 50, 0.95, 1.0, 0.01).unwrap();
        assert!(rel(d2_closed(&c, 0.8), d2_direct(&c, 0.8)) < 1e-10);
        assert!(rel(d3_closed(&c, 0.8), d3_direct(&c, 0.8)) < 1e-10);
    }

    #[test]
    fn every_branch_matches_direct() {
        for &(lam, gamma) in &[
            (1.0, 1.0),
            (0.7, 1.0),
            (1.0, 0.8),
            (0.85, 0.85),
            (1.25, 0.8),
            (0.6, 0.9),
            (1.1, 0.5),
        ] {
            for n in [1, 2, 3, 17, 120] {
                for se2 in [0.0, 0.01, 1.0] {
                    let c = cfg(n, gamma, 1.0, se2);
                    for (name, cl, di) in [
                        ("D1", d1_closed(&c, lam), d1_direct(&c, lam)),
                        ("D2", d2_closed(&c, lam), d2_direct(&c, lam)),
                        ("D3", d3_closed(&c, lam), d3_direct(&c, lam)),
                    ] {
                        assert!(rel(cl, di) < 1e-10, "{name} lam={lam} gamma={gamma} n={n} se2={se2}: {cl} vs {di}");
                    }
                }
            }
        }
    }

    #[test]
    fn effective_covariance_structure() {
        let c = TaskConfig::isotropic(10, 20, 0.9, 1.0, 0.01).unwrap();
        let cs = constant_set(&c, 0.8).unwrap();
        let want = 12.0 * cs.d2 + cs.d3;
        assert!((&cs.lambda_tilde - DMatrix::identity(10, 10) * want).amax() < 1e-12 * want);
        let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 0.5]));
        let c = TaskConfig::new(20, 0.9, 1.0, 0.01, diag).unwrap();
        let m = effective_covariance(&c, 0.8).unwrap();
        let (d2, d3) = (d2_direct(&c, 0.8), d3_direct(&c, 0.8));
        for (k, l) in [1.0, 2.0, 0.5].into_iter().enumerate() {
            assert!(rel(m[(k, k)], d2 * (2.0 * l + 3.5) + d3 * l) < 1e-14);
        }
        assert_eq!(m[(0, 1)], 0.0);
    }

    #[test]
    fn bundle_fields_equal_individual_ops() {
        let c = cfg(40, 0.9, 1.0, 0.1);
        let cs = constant_set(&c, 0.7).unwrap();
        assert_eq!(cs.d1, d1_direct(&c, 0.7));
        assert_eq!(cs.d2, d2_direct(&c, 0.7));
        assert_eq!(cs.d3, d3_direct(&c, 0.7));
        assert_eq!(cs.d4, d4_closed(&c));
        assert_eq!(cs.lambda_tilde, effective_covariance(&c, 0.7).unwrap());
        let big = cfg(400, 0.9, 1.0, 0.1);
        let cs = constant_set(&big, 0.7).unwrap();
        assert_eq!(cs.d3, d3_closed(&big, 0.7));
    }

    #[test]
    fn degenerate_set_is_allowed() {
        let cs = constant_set(&cfg(5, 0.9, 0.0, 0.0), 0.8).unwrap();
        assert!(cs.is_degenerate());
        assert!(constant_set(&cfg(5, 0.9, 1.0, 0.0), 0.0).is_err());
    }
}

#[cfg(test)]
mod continuity {
    use super::*;

    /// Closed forms just off a locus stay close to the on-locus value.
    #[test]
    fn branch_continuity() {
        let loci = [(1.0, 1.0), (0.8, 1.0), (1.0, 0.8), (0.8, 0.8), (1.25, 0.8), (0.9, 1.0 / 0.9)];
        for (l0, g0) in loci {
            for n in [1usize, 2, 3, 10, 100, 500] {
                for se2 in [0.0, 0.01, 1.0] {
                    let exact = closed_triple_raw(l0, g0, 1.0, se2, n);
                    for (dl, dg) in [(1e-7, 0.0), (-1e-7, 0.0), (0.0, 1e-7), (0.0, -1e-7)] {
                        let near = closed_triple_raw(l0 + dl, g0 + dg, 1.0, se2, n);
                        for (a, b) in [(near.d1, exact.d1), (near.d2, exact.d2), (near.d3, exact.d3)] {
                            let r = (a - b).abs() / b.abs().max(1e-300);
                            assert!(r <= 1e-4, "({l0}+{dl}, {g0}+{dg}) n={n} se2={se2}: {a} vs {b}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn series_agrees_with_closed_form_at_handover() {
        for n in [2usize, 10, 100] {
            let delta = 1.01 * SERIES_RADIUS / (2 * n + 2) as f64;
            for (lam, gamma) in [(1.0 - delta, 1.0), (1.0, 1.0 + delta)] {
                let closed = closed_triple_raw(lam, gamma, 1.0, 0.5, n);
                let c = TaskConfig::isotropic(1, n, gamma, 1.0, 0.5).unwrap();
                let direct = [d1_direct(&c, lam), d2_direct(&c, lam), d3_direct(&c, lam)];
                for (a, b) in [closed.d1, closed.d2, closed.d3].into_iter().zip(direct) {
                    assert!((a - b).abs() / b < 1e-8, "n={n} lam={lam} gamma={gamma}: {a} vs {b}");
                }
                let inside = 0.99 * SERIES_RADIUS / (2 * n + 2) as f64;
                let (l2, g2) = if lam < 1.0 { (1.0 - inside, 1.0) } else { (1.0, 1.0 + inside) };
                let series = closed_triple_raw(l2, g2, 1.0, 0.5, n);
                let c = TaskConfig::isotropic(1, n, g2, 1.0, 0.5).unwrap();
                assert!((series.d3 - d3_direct(&c, l2)).abs() / series.d3 < 1e-10);
            }
        }
    }
}
