//! Routing-by-agreement for capsule layers.
//!
//! The 1x1 convolutional capsule layer treats each input feature map `f_i`
//! as a capsule and predicts output map `j` as `W[i][j] * f_i`. Output maps
//! are coupling-weighted sums of predictions, and the couplings are refined
//! by the agreement between predictions and the squashed outputs.
//!
//! Two equivalent routings are provided:
//!
//! * [`route_conv1x1_naive`] materializes every output map in every
//!   iteration, costing `O(I*J*S)` per iteration for `S` pixels.
//! * [`route_conv1x1_kernel`] rewrites each agreement through the Gram
//!   matrix `G[l][i] = f_l . f_i`:
//!
//!   ```text
//!   f_hat(j|i) . g_j = W[i][j] * sum_l W[l][j] c[l][j] G[i][l]
//!   |g_j|^2          = sum_i c[i][j] (f_hat(j|i) . g_j)
//!   f_hat(j|i) . squash(g_j) = |g_j| / (1 + |g_j|^2) * (f_hat(j|i) . g_j)
//!   ```
//!
//!   so iterations never touch the maps: `O(I^2*S)` once for the Gram
//!   matrix, then `O(I^2*J)` per iteration.

use crate::error::{invalid, Error, Result};
use crate::matrix::{dot, Matrix};
use crate::tensor::Tensor;

/// Negative squared norms down to this value are rounding noise and clamp to 0.
pub const NORM_SQ_TOLERANCE: f64 = 1e-9;

/// Which routing iterations carry gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Couplings are constants for backpropagation.
    None,
    /// The final softmax / evidence-update pair is differentiated; earlier
    /// iterations are detached.
    #[default]
    Last,
}

/// `|v|^2 / (1 + |v|^2) * v / |v|`; the zero vector maps to itself.
pub fn squash(v: &[f64]) -> Vec<f64> {
    let k = squash_factor(v.iter().map(|x| x * x).sum());
    v.iter().map(|x| k * x).collect()
}

/// Scalar `k` with `squash(v) = k * v`, as a function of `|v|^2`.
pub fn squash_factor(norm_sq: f64) -> f64 {
    norm_sq.sqrt() / (1.0 + norm_sq)
}

/// Vector-Jacobian product of [`squash`] at `v` (the Jacobian is symmetric).
pub fn squash_vjp(v: &[f64], grad: &[f64]) -> Vec<f64> {
    let q: f64 = v.iter().map(|x| x * x).sum();
    let n = q.sqrt();
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    let k = n / (1.0 + q);
    // dk/dn / n
    let kp = (1.0 - q) / ((1.0 + q) * (1.0 + q)) / n;
    let dot: f64 = v.iter().zip(grad).map(|(a, b)| a * b).sum();
    v.iter().zip(grad).map(|(x, g)| k * g + kp * dot * x).collect()
}

/// Row-wise softmax over the output index: `c[i][j] = exp(b[i][j]) / sum_k exp(b[i][k])`.
pub fn coupling_softmax(logits: &Matrix) -> Matrix {
    let mut c = logits.clone();
    for i in 0..c.rows() {
        let row = c.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    c
}

/// Gram matrix of the rows of `features` (one flattened map per row).
pub fn gram(features: &Matrix) -> Result<Matrix> {
    let n = features.rows();
    if n == 0 {
        return Err(invalid("gram of an empty feature list"));
    }
    let mut g = Matrix::zeros(n, n);
    for l in 0..n {
        let fl = features.row(l);
        for i in l..n {
            let v = dot(fl, features.row(i));
            g.set(l, i, v);
            g.set(i, l, v);
        }
    }
    Ok(g)
}

/// Parameters of a routed 1x1 convolution: scalar `W[i][j]` per input map
/// `i` and output map `j`, and the routing iteration count.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1CapsuleParams {
    pub weights: Matrix,
    pub iterations: usize,
}

impl Conv1x1CapsuleParams {
    pub fn new(weights: Matrix, iterations: usize) -> Result<Self> {
        let p = Self { weights, iterations };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(invalid("routing needs at least one iteration"));
        }
        if self.weights.rows() == 0 || self.weights.cols() == 0 {
            return Err(invalid("routing weights must be at least 1x1"));
        }
        if self.weights.as_slice().iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("non-finite routing weight".into()));
        }
        Ok(())
    }
}

/// Logits, couplings and Gram matrix of one routed layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    pub logits: Matrix,
    pub couplings: Matrix,
    pub gram: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NaiveRouting {
    /// Output maps, one row per output `j`.
    pub outputs: Matrix,
    pub couplings: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelRouting {
    pub couplings: Matrix,
    pub logits: Matrix,
    /// `|g_j|` of the outputs built from the final couplings.
    pub norms: Vec<f64>,
}

/// Element-wise routing over full feature maps (`features` is I x S).
pub fn route_conv1x1_naive(features: &Matrix, params: &Conv1x1CapsuleParams) -> Result<NaiveRouting> {
    params.validate()?;
    let w = &params.weights;
    let (n_in, n_out) = (w.rows(), w.cols());
    if features.rows() != n_in {
        return Err(Error::ShapeMismatch {
            op: "route_conv1x1_naive",
            lhs: vec![features.rows(), features.cols()],
            rhs: vec![n_in, n_out],
        });
    }
    let s = features.cols();
    let mut logits = Matrix::zeros(n_in, n_out);
    let mut couplings = coupling_softmax(&logits);
    let mut outputs = Matrix::zeros(n_out, s);
    for _ in 0..params.iterations {
        couplings = coupling_softmax(&logits);
        outputs = combine(features, w, &couplings);
        for j in 0..n_out {
            let squashed = squash(outputs.row(j));
            for i in 0..n_in {
                let agreement: f64 = features
                    .row(i)
                    .iter()
                    .zip(&squashed)
                    .map(|(f, v)| w.get(i, j) * f * v)
                    .sum();
                logits.set(i, j, logits.get(i, j) + agreement);
            }
        }
    }
    Ok(NaiveRouting { outputs, couplings })
}

/// `g_j = sum_i c[i][j] W[i][j] f_i`, one output row per `j`.
pub(crate) fn combine(features: &Matrix, w: &Matrix, couplings: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(w.cols(), features.cols());
    for j in 0..w.cols() {
        let dst = out.row_mut(j);
        for i in 0..w.rows() {
            let coef = couplings.get(i, j) * w.get(i, j);
            dst.iter_mut().zip(features.row(i)).for_each(|(d, f)| *d += coef * f);
        }
    }
    out
}

/// One evidence-update step expressed through the Gram matrix.
pub(crate) struct KernelStep {
    /// `U[i][j] = sum_l G[i][l] W[l][j] c[l][j]`
    pub u: Matrix,
    /// `A[i][j] = f_hat(j|i) . g_j = W[i][j] U[i][j]`
    pub agreement: Matrix,
    /// `|g_j|^2`
    pub norm_sq: Vec<f64>,
}

pub(crate) fn kernel_step(gram: &Matrix, w: &Matrix, couplings: &Matrix) -> Result<KernelStep> {
    let (n_in, n_out) = (w.rows(), w.cols());
    let weighted = Matrix::from_fn(n_in, n_out, |l, j| w.get(l, j) * couplings.get(l, j));
    let mut u = Matrix::zeros(n_in, n_out);
    for i in 0..n_in {
        let dst = u.row_mut(i);
        for (l, &g) in gram.row(i).iter().enumerate() {
            dst.iter_mut().zip(weighted.row(l)).for_each(|(d, m)| *d += g * m);
        }
    }
    let agreement = Matrix::from_fn(n_in, n_out, |i, j| w.get(i, j) * u.get(i, j));
    let mut norm_sq = vec![0.0; n_out];
    for i in 0..n_in {
        for (j, q) in norm_sq.iter_mut().enumerate() {
            *q += couplings.get(i, j) * agreement.get(i, j);
        }
    }
    for (j, q) in norm_sq.iter_mut().enumerate() {
        if *q < 0.0 {
            if *q < -NORM_SQ_TOLERANCE {
                return Err(Error::Numerical(format!(
                    "squared norm of output {j} is {q:e}, below -{NORM_SQ_TOLERANCE:e}"
                )));
            }
            *q = 0.0;
        }
    }
    Ok(KernelStep { u, agreement, norm_sq })
}

/// Adds `f_hat(j|i) . squash(g_j)` to the logits.
pub(crate) fn apply_evidence(logits: &mut Matrix, step: &KernelStep) {
    for (j, &q) in step.norm_sq.iter().enumerate() {
        let k = squash_factor(q);
        for i in 0..logits.rows() {
            logits.set(i, j, logits.get(i, j) + k * step.agreement.get(i, j));
        }
    }
}

fn check_gram(gram: &Matrix, params: &Conv1x1CapsuleParams) -> Result<()> {
    params.validate()?;
    if gram.rows() != gram.cols() {
        return Err(invalid(format!(
            "Gram matrix must be square, got {}x{}",
            gram.rows(),
            gram.cols()
        )));
    }
    if gram.rows() != params.weights.rows() {
        return Err(Error::ShapeMismatch {
            op: "route_conv1x1_kernel",
            lhs: vec![gram.rows(), gram.cols()],
            rhs: vec![params.weights.rows(), params.weights.cols()],
        });
    }
    Ok(())
}

/// Routing driven only by the Gram matrix of the input maps.
pub fn route_conv1x1_kernel(gram: &Matrix, params: &Conv1x1CapsuleParams) -> Result<KernelRouting> {
    route_conv1x1_kernel_observed(gram, params, |_, _| {})
}

/// As [`route_conv1x1_kernel`], calling `observe(iteration, couplings)` after
/// every softmax step (iterations count from 1).
pub fn route_conv1x1_kernel_observed(
    gram: &Matrix,
    params: &Conv1x1CapsuleParams,
    mut observe: impl FnMut(usize, &Matrix),
) -> Result<KernelRouting> {
    check_gram(gram, params)?;
    let w = &params.weights;
    let mut logits = Matrix::zeros(w.rows(), w.cols());
    let mut couplings = coupling_softmax(&logits);
    let mut norm_sq = Vec::new();
    for it in 1..=params.iterations {
        couplings = coupling_softmax(&logits);
        observe(it, &couplings);
        let step = kernel_step(gram, w, &couplings)?;
        apply_evidence(&mut logits, &step);
        norm_sq = step.norm_sq;
    }
    Ok(KernelRouting {
        couplings,
        logits,
        norms: norm_sq.into_iter().map(f64::sqrt).collect(),
    })
}

/// Per-pair transforms of the fully connected capsule layer, stored as a
/// `n_in x n_out x dim_in x dim_out` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FcCapsuleParams {
    pub weights: Tensor,
    pub iterations: usize,
}

impl FcCapsuleParams {
    pub fn new(weights: Tensor, iterations: usize) -> Result<Self> {
        if iterations < 1 {
            return Err(invalid("routing needs at least one iteration"));
        }
        weights.nchw()?;
        if !weights.is_finite() {
            return Err(Error::Numerical("non-finite capsule transform".into()));
        }
        Ok(Self { weights, iterations })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.weights.dims();
        (d[0], d[1], d[2], d[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcRouting {
    /// Squashed class capsules, one row per output.
    pub capsules: Matrix,
    pub couplings: Matrix,
}

/// Predictions `u_hat[i][j] = W[i][j]^T u_i`, laid out `(i * n_out + j) * dim_out`.
pub(crate) fn fc_predictions(inputs: &[f64], weights: &[f64], dims: (usize, usize, usize, usize)) -> Vec<f64> {
    let (n_in, n_out, d_in, d_out) = dims;
    let mut pred = vec![0.0; n_in * n_out * d_out];
    for i in 0..n_in {
        let u = &inputs[i * d_in..(i + 1) * d_in];
        for j in 0..n_out {
            let dst = &mut pred[(i * n_out + j) * d_out..(i * n_out + j + 1) * d_out];
            for (d, &ud) in u.iter().enumerate() {
                let wrow = &weights[((i * n_out + j) * d_in + d) * d_out..((i * n_out + j) * d_in + d + 1) * d_out];
                dst.iter_mut().zip(wrow).for_each(|(p, w)| *p += ud * w);
            }
        }
    }
    pred
}

/// `s_j = sum_i c[i][j] u_hat[i][j]`
pub(crate) fn fc_combine(pred: &[f64], couplings: &Matrix, d_out: usize) -> Matrix {
    let (n_in, n_out) = (couplings.rows(), couplings.cols());
    let mut s = Matrix::zeros(n_out, d_out);
    for i in 0..n_in {
        for j in 0..n_out {
            let c = couplings.get(i, j);
            let p = &pred[(i * n_out + j) * d_out..(i * n_out + j + 1) * d_out];
            s.row_mut(j).iter_mut().zip(p).for_each(|(d, v)| *d += c * v);
        }
    }
    s
}

pub(crate) fn fc_squash_rows(s: &Matrix) -> Matrix {
    let mut v = s.clone();
    for j in 0..s.rows() {
        let sq = squash(s.row(j));
        v.row_mut(j).copy_from_slice(&sq);
    }
    v
}

pub(crate) fn fc_agreement(logits: &mut Matrix, pred: &[f64], v: &Matrix) {
    let (n_in, n_out) = (logits.rows(), logits.cols());
    let d_out = v.cols();
    for i in 0..n_in {
        for j in 0..n_out {
            let p = &pred[(i * n_out + j) * d_out..(i * n_out + j + 1) * d_out];
            let a: f64 = p.iter().zip(v.row(j)).map(|(x, y)| x * y).sum();
            logits.set(i, j, logits.get(i, j) + a);
        }
    }
}

/// Routes primary capsules (`n_in x dim_in`) to squashed class capsules.
pub fn route_fc(primary: &Matrix, params: &FcCapsuleParams) -> Result<FcRouting> {
    let dims = params.dims();
    let (n_in, n_out, d_in, d_out) = dims;
    if primary.rows() != n_in || primary.cols() != d_in {
        return Err(Error::ShapeMismatch {
            op: "route_fc",
            lhs: vec![primary.rows(), primary.cols()],
            rhs: params.weights.dims().to_vec(),
        });
    }
    let pred = fc_predictions(primary.as_slice(), params.weights.data(), dims);
    let mut logits = Matrix::zeros(n_in, n_out);
    let mut couplings = coupling_softmax(&logits);
    let mut v = Matrix::zeros(n_out, d_out);
    for _ in 0..params.iterations {
        couplings = coupling_softmax(&logits);
        let s = fc_combine(&pred, &couplings, d_out);
        v = fc_squash_rows(&s);
        fc_agreement(&mut logits, &pred, &v);
    }
    Ok(FcRouting { capsules: v, couplings })
}
