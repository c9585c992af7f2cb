//! Forward computation of gated linear attention with merged key-query
//! weights: `o_i = W_V M_i W_KQ z_i` with `M_i = λM_{i−1} + z_i z_iᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::task_gen::Prompt;

/// One GLA layer. Only `W_KQ = W_Kᵀ W_Q` is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct GlaParams {
    pub w_v: DMatrix<f64>,
    pub w_kq: DMatrix<f64>,
    pub lam: f64,
}

impl GlaParams {
    pub fn new(w_v: DMatrix<f64>, w_kq: DMatrix<f64>, lam: f64) -> Result<Self> {
        if !w_v.is_square() || w_v.shape() != w_kq.shape() {
            return Err(Error::DimensionMismatch {
                what: "W_V and W_KQ shape",
                expected: w_v.nrows(),
                got: w_kq.nrows(),
            });
        }
        if !(lam > 0.0 && lam <= 1.0) {
            return Err(Error::InvalidConfig(format!("forgetting factor must lie in (0, 1], got {lam}")));
        }
        Ok(Self { w_v, w_kq, lam })
    }

    pub fn zeros(d: usize, lam: f64) -> Self {
        Self {
            w_v: DMatrix::zeros(d + 1, d + 1),
            w_kq: DMatrix::zeros(d + 1, d + 1),
            lam,
        }
    }

    /// Token dimension `d + 1`.
    pub fn width(&self) -> usize {
        self.w_v.nrows()
    }

    fn check(&self, tokens: &DMatrix<f64>) -> Result<()> {
        if tokens.nrows() != self.width() {
            return Err(Error::DimensionMismatch {
                what: "token dimension",
                expected: self.width(),
                got: tokens.nrows(),
            });
        }
        Ok(())
    }
}

/// The blocks `(U11, u₋₁)` that carry the prediction under the structured
/// initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedParams {
    pub u11: DMatrix<f64>,
    pub u_neg1: f64,
}

impl ReducedParams {
    pub fn new(u11: DMatrix<f64>, u_neg1: f64) -> Result<Self> {
        if !u11.is_square() {
            return Err(Error::DimensionMismatch {
                what: "U11 columns",
                expected: u11.nrows(),
                got: u11.ncols(),
            });
        }
        if !u_neg1.is_finite() || u11.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reduced parameters".into()));
        }
        Ok(Self { u11, u_neg1 })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            u11: DMatrix::zeros(d, d),
            u_neg1: 0.0,
        }
    }

    pub fn d(&self) -> usize {
        self.u11.nrows()
    }

    /// `u₋₁·U11`, invariant under `(U11, u₋₁) → (U11/c, c·u₋₁)`.
    pub fn product(&self) -> DMatrix<f64> {
        &self.u11 * self.u_neg1
    }

    /// `u₋₁² − ‖U11‖_F²`, conserved by gradient flow.
    pub fn balancedness(&self) -> f64 {
        self.u_neg1 * self.u_neg1 - self.u11.norm_squared()
    }

    /// Full layer with `W_V[d, d] = u₋₁`, `W_KQ[:d, :d] = U11`, all else zero.
    pub fn embed(&self, lam: f64) -> GlaParams {
        let d = self.d();
        let mut p = GlaParams::zeros(d, lam);
        p.w_v[(d, d)] = self.u_neg1;
        p.w_kq.view_mut((0, 0), (d, d)).copy_from(&self.u11);
        p
    }
}

fn scan_tokens(params: &GlaParams, tokens: &DMatrix<f64>) -> DMatrix<f64> {
    let w = params.width();
    let v = &params.w_v * tokens;
    let q = &params.w_kq * tokens;
    let mut state = DMatrix::zeros(w, w);
    let mut out = DMatrix::zeros(w, tokens.ncols());
    for i in 0..tokens.ncols() {
        state *= params.lam;
        state.ger(1.0, &v.column(i), &tokens.column(i), 1.0);
        out.set_column(i, &(&state * q.column(i)));
    }
    out
}

/// Tokens with the query-label slot forced to zero.
fn masked_tokens(prompt: &Prompt) -> DMatrix<f64> {
    let mut z = prompt.tokens().clone();
    let (d, n) = (prompt.d(), prompt.n());
    z[(d, n)] = 0.0;
    z
}

/// Outputs `o_1 .. o_{n+1}` as the columns of a `(d+1) × (n+1)` matrix.
pub fn forward_scan(params: &GlaParams, prompt: &Prompt) -> Result<DMatrix<f64>> {
    params.check(prompt.tokens())?;
    Ok(scan_tokens(params, &masked_tokens(prompt)))
}

/// Same outputs as [`forward_scan`] from the unrolled sum
/// `o_i = Σ_{j≤i} λ^{i−j} W_V z_j z_jᵀ W_KQ z_i`. Quadratic in `n`.
pub fn forward_unrolled(params: &GlaParams, prompt: &Prompt) -> Result<DMatrix<f64>> {
    params.check(prompt.tokens())?;
    let z = &masked_tokens(prompt);
    let mut out = DMatrix::zeros(z.nrows(), z.ncols());
    for i in 0..z.ncols() {
        let q = &params.w_kq * z.column(i);
        let mut acc = DVector::zeros(z.nrows());
        for j in 0..=i {
            let weight = params.lam.powi((i - j) as i32) * z.column(j).dot(&q);
            acc += &params.w_v * z.column(j) * weight;
        }
        out.set_column(i, &acc);
    }
    Ok(out)
}

/// Last entry of `o_{n+1}`: the model's guess for the query label.
pub fn predict(params: &GlaParams, prompt: &Prompt) -> Result<f64> {
    let z = prompt.tokens();
    params.check(z)?;
    let w = params.width();
    // Only the bottom row of the state reaches the prediction.
    let row = params.w_v.row(w - 1);
    let mut state = DVector::zeros(w);
    let last = z.ncols() - 1;
    for i in 0..last {
        state *= params.lam;
        state.axpy(row.dot(&z.column(i).transpose()), &z.column(i), 1.0);
    }
    let mut query = z.column(last).into_owned();
    query[w - 1] = 0.0;
    state *= params.lam;
    state.axpy(row.dot(&query.transpose()), &query, 1.0);
    Ok(state.dot(&(&params.w_kq * query)))
}

/// `u₋₁ Σ_{i≤n} λ^{n+1−i} y_i x_iᵀ U11 x_{n+1}`.
pub fn predict_reduced(rp: &ReducedParams, prompt: &Prompt, lam: f64) -> f64 {
    let h = prompt.discounted_label_input(lam);
    rp.u_neg1 * h.dot(&(&rp.u11 * prompt.query()))
}

/// `uᵀHu` with `u = vec(U)`, `H = ½ X ⊗ Σ_{i≤n+1} λ^{n+1−i} z_i z_iᵀ` and
/// `X = [[0, x_{n+1}], [x_{n+1}ᵀ, 0]]`. Builds the Kronecker product explicitly.
pub fn quadratic_form_prediction(rp: &ReducedParams, prompt: &Prompt, lam: f64) -> f64 {
    let z = &masked_tokens(prompt);
    let (d, cols) = (rp.d(), z.ncols());
    let mut m = DMatrix::zeros(d + 1, d + 1);
    for i in 0..cols {
        m *= lam;
        m.ger(1.0, &z.column(i), &z.column(i), 1.0);
    }
    let x = prompt.query();
    let mut xm = DMatrix::zeros(d + 1, d + 1);
    xm.view_mut((0, d), (d, 1)).copy_from(&x);
    xm.view_mut((d, 0), (1, d)).copy_from(&x.transpose());
    let h = xm.kronecker(&m) * 0.5;
    let mut u = DMatrix::zeros(d + 1, d + 1);
    u.view_mut((0, 0), (d, d)).copy_from(&rp.u11);
    u[(d, d)] = rp.u_neg1;
    let vec_u = DVector::from_column_slice(u.as_slice());
    vec_u.dot(&(h * &vec_u))
}

/// Forward pass of a residual stack. Each layer reads the running tokens with
/// the query-label slot masked to zero and adds its outputs to the stream; the
/// prediction is the query-label slot of the final stream, i.e. the sum of the
/// layers' outputs at that slot.
pub fn stack_forward(layers: &[GlaParams], prompt: &Prompt) -> Result<f64> {
    let (_, stream) = stack_streams(layers, prompt)?;
    let (d, n) = (prompt.d(), prompt.n());
    Ok(stream.last().expect("at least one layer")[(d, n)])
}

/// Per-layer masked inputs and the residual streams `Z^(1) .. Z^(L+1)`.
pub(crate) fn stack_streams(layers: &[GlaParams], prompt: &Prompt) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    if layers.is_empty() {
        return Err(Error::InvalidConfig("stack needs at least one layer".into()));
    }
    let (d, n) = (prompt.d(), prompt.n());
    let mut inputs = Vec::with_capacity(layers.len());
    let mut streams = vec![masked_tokens(prompt)];
    for layer in layers {
        let z = streams.last().expect("nonempty");
        layer.check(z)?;
        let mut masked = z.clone();
        masked[(d, n)] = 0.0;
        let out = scan_tokens(layer, &masked);
        streams.push(z + out);
        inputs.push(masked);
    }
    Ok((inputs, streams))
}
