//! Capsule layers recorded on the autodiff tape.
//!
//! Routing runs per sample; batch members never share logits, couplings or
//! Gram matrices. Under [`GradMode::Last`] the logits entering the final
//! evidence update are treated as constants, and adjoints flow through that
//! update, the final softmax and the output combination. Under
//! [`GradMode::None`] the final couplings themselves are constants.

use crate::autodiff::{Function, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::matrix::{dot, Matrix};
use crate::routing::{
    apply_evidence, combine, coupling_softmax, fc_agreement, fc_combine, fc_predictions, fc_squash_rows, gram,
    kernel_step, squash, squash_factor, squash_vjp, GradMode,
};
use crate::tensor::Tensor;

/// Saved quantities of the differentiable evidence update for one sample.
struct ConvLastStep {
    prev_couplings: Matrix,
    gram: Matrix,
    u: Matrix,
    agreement: Matrix,
    norm_sq: Vec<f64>,
}

struct ConvSample {
    couplings: Matrix,
    last: Option<ConvLastStep>,
}

struct Conv1x1CapsuleFn {
    samples: Vec<ConvSample>,
    n_in: usize,
    n_out: usize,
    plane: usize,
}

impl Function for Conv1x1CapsuleFn {
    fn name(&self) -> &'static str {
        "conv1x1_capsule"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (n_in, n_out, s) = (self.n_in, self.n_out, self.plane);
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        for (n, sample) in self.samples.iter().enumerate() {
            let f = &x[n * n_in * s..(n + 1) * n_in * s];
            let dg = &grad_out[n * n_out * s..(n + 1) * n_out * s];
            let df = &mut dx[n * n_in * s..(n + 1) * n_in * s];
            let c = &sample.couplings;
            // P[i][j] = f_i . dg_j
            let mut p = Matrix::zeros(n_in, n_out);
            for i in 0..n_in {
                let fi = &f[i * s..(i + 1) * s];
                for j in 0..n_out {
                    let dgj = &dg[j * s..(j + 1) * s];
                    p.set(i, j, dot(fi, dgj));
                }
            }
            for i in 0..n_in {
                let dfi = &mut df[i * s..(i + 1) * s];
                for j in 0..n_out {
                    dw[i * n_out + j] += c.get(i, j) * p.get(i, j);
                    let coef = c.get(i, j) * w[i * n_out + j];
                    let dgj = &dg[j * s..(j + 1) * s];
                    dfi.iter_mut().zip(dgj).for_each(|(d, g)| *d += coef * g);
                }
            }
            let Some(last) = &sample.last else { continue };
            // softmax adjoint: db = c * (dc - rowsum(c * dc)), dc = W * P
            let mut db = Matrix::zeros(n_in, n_out);
            for i in 0..n_in {
                let dot: f64 = (0..n_out).map(|j| c.get(i, j) * w[i * n_out + j] * p.get(i, j)).sum();
                for j in 0..n_out {
                    db.set(i, j, c.get(i, j) * (w[i * n_out + j] * p.get(i, j) - dot));
                }
            }
            // b = b_prev + k(q_j) A[i][j]
            let mut da = Matrix::zeros(n_in, n_out);
            for j in 0..n_out {
                let q = last.norm_sq[j];
                let k = squash_factor(q);
                let dk: f64 = (0..n_in).map(|i| last.agreement.get(i, j) * db.get(i, j)).sum();
                let n = q.sqrt();
                let dk_dq = if n > 0.0 {
                    (1.0 - q) / (2.0 * n * (1.0 + q) * (1.0 + q))
                } else {
                    0.0
                };
                let dq = dk * dk_dq;
                for i in 0..n_in {
                    da.set(i, j, k * db.get(i, j) + last.prev_couplings.get(i, j) * dq);
                }
            }
            // A = W * U, U = G M, M = W * c_prev
            let mut du = Matrix::zeros(n_in, n_out);
            for i in 0..n_in {
                for j in 0..n_out {
                    dw[i * n_out + j] += da.get(i, j) * last.u.get(i, j);
                    du.set(i, j, da.get(i, j) * w[i * n_out + j]);
                }
            }
            let mut dgram = Matrix::zeros(n_in, n_in);
            for i in 0..n_in {
                for l in 0..n_in {
                    let mut acc = 0.0;
                    for j in 0..n_out {
                        acc += du.get(i, j) * w[l * n_out + j] * last.prev_couplings.get(l, j);
                    }
                    dgram.set(i, l, acc);
                }
            }
            for l in 0..n_in {
                for j in 0..n_out {
                    let dm: f64 = (0..n_in).map(|i| last.gram.get(i, l) * du.get(i, j)).sum();
                    dw[l * n_out + j] += dm * last.prev_couplings.get(l, j);
                }
            }
            // G = F F^T
            for i in 0..n_in {
                let dfi = &mut df[i * s..(i + 1) * s];
                for l in 0..n_in {
                    let coef = dgram.get(i, l) + dgram.get(l, i);
                    if coef != 0.0 {
                        let fl = &f[l * s..(l + 1) * s];
                        dfi.iter_mut().zip(fl).for_each(|(d, v)| *d += coef * v);
                    }
                }
            }
        }
        vec![Some(dx), Some(dw)]
    }
}

struct Conv1x1PlainFn {
    n_in: usize,
    n_out: usize,
    plane: usize,
}

impl Function for Conv1x1PlainFn {
    fn name(&self) -> &'static str {
        "conv1x1_plain"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (n_in, n_out, s) = (self.n_in, self.n_out, self.plane);
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        for n in 0..x.len() / (n_in * s) {
            for i in 0..n_in {
                let fi = &x[(n * n_in + i) * s..(n * n_in + i + 1) * s];
                let dfi = &mut dx[(n * n_in + i) * s..(n * n_in + i + 1) * s];
                for j in 0..n_out {
                    let dg = &grad_out[(n * n_out + j) * s..(n * n_out + j + 1) * s];
                    dw[i * n_out + j] += fi.iter().zip(dg).map(|(a, b)| a * b).sum::<f64>();
                    let wij = w[i * n_out + j];
                    dfi.iter_mut().zip(dg).for_each(|(d, g)| *d += wij * g);
                }
            }
        }
        vec![Some(dx), Some(dw)]
    }
}

struct FcLastStep {
    prev_couplings: Matrix,
    prev_s: Matrix,
    prev_v: Matrix,
}

struct FcSample {
    pred: Vec<f64>,
    couplings: Matrix,
    s: Matrix,
    last: Option<FcLastStep>,
}

struct FcCapsuleFn {
    samples: Vec<FcSample>,
    dims: (usize, usize, usize, usize),
}

impl Function for FcCapsuleFn {
    fn name(&self) -> &'static str {
        "fc_capsule_routing"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n_in, n_out, d_in, d_out) = self.dims;
        let (u, w) = (inputs[0].data(), inputs[1].data());
        let mut du = vec![0.0; u.len()];
        let mut dw = vec![0.0; w.len()];
        for (n, sample) in self.samples.iter().enumerate() {
            let dv = &grad_out[n * n_out * d_out..(n + 1) * n_out * d_out];
            let c = &sample.couplings;
            let mut ds = Matrix::zeros(n_out, d_out);
            for j in 0..n_out {
                let g = squash_vjp(sample.s.row(j), &dv[j * d_out..(j + 1) * d_out]);
                ds.row_mut(j).copy_from_slice(&g);
            }
            let mut dpred = vec![0.0; n_in * n_out * d_out];
            let mut dc = Matrix::zeros(n_in, n_out);
            for i in 0..n_in {
                for j in 0..n_out {
                    let off = (i * n_out + j) * d_out;
                    let p = &sample.pred[off..off + d_out];
                    dc.set(i, j, p.iter().zip(ds.row(j)).map(|(a, b)| a * b).sum());
                    let cij = c.get(i, j);
                    dpred[off..off + d_out]
                        .iter_mut()
                        .zip(ds.row(j))
                        .for_each(|(d, g)| *d += cij * g);
                }
            }
            if let Some(last) = &sample.last {
                let mut dprev_v = Matrix::zeros(n_out, d_out);
                for i in 0..n_in {
                    let dot: f64 = (0..n_out).map(|j| c.get(i, j) * dc.get(i, j)).sum();
                    for j in 0..n_out {
                        let db = c.get(i, j) * (dc.get(i, j) - dot);
                        let off = (i * n_out + j) * d_out;
                        dpred[off..off + d_out]
                            .iter_mut()
                            .zip(last.prev_v.row(j))
                            .for_each(|(d, v)| *d += db * v);
                        dprev_v
                            .row_mut(j)
                            .iter_mut()
                            .zip(&sample.pred[off..off + d_out])
                            .for_each(|(d, p)| *d += db * p);
                    }
                }
                for j in 0..n_out {
                    let ds_prev = squash_vjp(last.prev_s.row(j), dprev_v.row(j));
                    for i in 0..n_in {
                        let cp = last.prev_couplings.get(i, j);
                        let off = (i * n_out + j) * d_out;
                        dpred[off..off + d_out]
                            .iter_mut()
                            .zip(&ds_prev)
                            .for_each(|(d, g)| *d += cp * g);
                    }
                }
            }
            let ui = &u[n * n_in * d_in..(n + 1) * n_in * d_in];
            let dui = &mut du[n * n_in * d_in..(n + 1) * n_in * d_in];
            accumulate_prediction_grads(ui, w, &dpred, self.dims, dui, &mut dw);
        }
        vec![Some(du), Some(dw)]
    }
}

/// Chain rule through `u_hat[i][j] = W[i][j]^T u_i` for one sample.
fn accumulate_prediction_grads(
    u: &[f64],
    w: &[f64],
    dpred: &[f64],
    dims: (usize, usize, usize, usize),
    du: &mut [f64],
    dw: &mut [f64],
) {
    let (n_in, n_out, d_in, d_out) = dims;
    for i in 0..n_in {
        for j in 0..n_out {
            let dp = &dpred[(i * n_out + j) * d_out..(i * n_out + j + 1) * d_out];
            for d in 0..d_in {
                let off = ((i * n_out + j) * d_in + d) * d_out;
                let ud = u[i * d_in + d];
                dw[off..off + d_out].iter_mut().zip(dp).for_each(|(g, p)| *g += ud * p);
                du[i * d_in + d] += w[off..off + d_out].iter().zip(dp).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

struct FcLinearFn {
    dims: (usize, usize, usize, usize),
}

impl Function for FcLinearFn {
    fn name(&self) -> &'static str {
        "fc_capsule_linear"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n_in, n_out, d_in, d_out) = self.dims;
        let (u, w) = (inputs[0].data(), inputs[1].data());
        let mut du = vec![0.0; u.len()];
        let mut dw = vec![0.0; w.len()];
        let batch = u.len() / (n_in * d_in);
        for n in 0..batch {
            let dv = &grad_out[n * n_out * d_out..(n + 1) * n_out * d_out];
            let mut dpred = vec![0.0; n_in * n_out * d_out];
            for i in 0..n_in {
                for j in 0..n_out {
                    dpred[(i * n_out + j) * d_out..(i * n_out + j + 1) * d_out]
                        .copy_from_slice(&dv[j * d_out..(j + 1) * d_out]);
                }
            }
            let ui = &u[n * n_in * d_in..(n + 1) * n_in * d_in];
            let dui = &mut du[n * n_in * d_in..(n + 1) * n_in * d_in];
            accumulate_prediction_grads(ui, w, &dpred, self.dims, dui, &mut dw);
        }
        vec![Some(du), Some(dw)]
    }
}

/// Permutation between NCHW maps and `N x (H*W*groups) x 8` capsules.
struct CapsuleReshapeFn {
    /// `perm[k]` is the input index that lands at output index `k`.
    perm: Vec<usize>,
}

impl Function for CapsuleReshapeFn {
    fn name(&self) -> &'static str {
        "primary_capsules"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; grad_out.len()];
        for (k, &src) in self.perm.iter().enumerate() {
            dx[src] = grad_out[k];
        }
        vec![Some(dx)]
    }
}

struct SquashCapsulesFn {
    dim: usize,
}

impl Function for SquashCapsulesFn {
    fn name(&self) -> &'static str {
        "squash_capsules"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let mut dx = Vec::with_capacity(x.len());
        for (v, g) in x.chunks(self.dim).zip(grad_out.chunks(self.dim)) {
            dx.extend(squash_vjp(v, g));
        }
        vec![Some(dx)]
    }
}

struct CapsuleNormFn {
    dim: usize,
}

impl Function for CapsuleNormFn {
    fn name(&self) -> &'static str {
        "capsule_norms"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let mut dx = vec![0.0; x.len()];
        for (k, (&norm, &g)) in output.data().iter().zip(grad_out).enumerate() {
            if norm > 0.0 {
                for d in 0..self.dim {
                    dx[k * self.dim + d] = g * x[k * self.dim + d] / norm;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Capsule layout of a head feature map: channels `[8m, 8m+8)` at each pixel
/// form capsule `m`; capsules are ordered by pixel, then group.
pub fn capsule_permutation(channels: usize, height: usize, width: usize, dim: usize) -> Result<Vec<usize>> {
    if dim == 0 || !channels.is_multiple_of(dim) {
        return Err(invalid(format!(
            "{channels} channels cannot be grouped into capsules of dimension {dim}"
        )));
    }
    let groups = channels / dim;
    let plane = height * width;
    let mut perm = Vec::with_capacity(channels * plane);
    for pos in 0..plane {
        for m in 0..groups {
            for d in 0..dim {
                perm.push((m * dim + d) * plane + pos);
            }
        }
    }
    Ok(perm)
}

/// Inverse of [`Tape::primary_capsules`] for one sample's capsule buffer.
pub fn capsules_to_maps(
    capsules: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    dim: usize,
) -> Result<Vec<f64>> {
    let perm = capsule_permutation(channels, height, width, dim)?;
    if capsules.len() != perm.len() {
        return Err(Error::ShapeMismatch {
            op: "capsules_to_maps",
            lhs: vec![capsules.len()],
            rhs: vec![channels, height, width],
        });
    }
    let mut maps = vec![0.0; perm.len()];
    for (k, &src) in perm.iter().enumerate() {
        maps[src] = capsules[k];
    }
    Ok(maps)
}

fn fc_dims(tape: &Tape, input: Var, weights: Var, op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
    let (batch, n_in, d_in) = match tape.dims(input) {
        &[b, n, d] => (b, n, d),
        other => return Err(invalid(format!("{op} expects N x caps x dim input, got {other:?}"))),
    };
    let (wn, n_out, wd, d_out) = tape.value(weights).nchw()?;
    if wn != n_in || wd != d_in {
        return Err(Error::ShapeMismatch {
            op,
            lhs: tape.dims(input).to_vec(),
            rhs: tape.dims(weights).to_vec(),
        });
    }
    Ok((batch, n_in, n_out, d_in, d_out))
}

impl Tape {
    /// Routed 1x1 convolution of an `N x I x H x W` input with an `I x J`
    /// weight matrix. Final couplings come from Gram-matrix routing; output
    /// maps `g_j = sum_i c[i][j] W[i][j] f_i` are built once.
    pub fn conv1x1_capsule(&mut self, input: Var, weights: Var, iterations: usize, grad_mode: GradMode) -> Result<Var> {
        self.conv1x1_capsule_traced(input, weights, iterations, grad_mode, None)
    }

    /// As [`Tape::conv1x1_capsule`], appending every per-iteration coupling
    /// matrix of every sample to `trace`.
    pub fn conv1x1_capsule_traced(
        &mut self,
        input: Var,
        weights: Var,
        iterations: usize,
        grad_mode: GradMode,
        mut trace: Option<&mut Vec<Matrix>>,
    ) -> Result<Var> {
        if iterations < 1 {
            return Err(invalid("routing needs at least one iteration"));
        }
        let (batch, n_in, h, w_px) = self.value(input).nchw()?;
        let (wi, n_out) = match self.dims(weights) {
            &[a, b] => (a, b),
            other => return Err(invalid(format!("routing weights must be I x J, got {other:?}"))),
        };
        if wi != n_in {
            return Err(Error::ShapeMismatch {
                op: "conv1x1_capsule",
                lhs: self.dims(input).to_vec(),
                rhs: self.dims(weights).to_vec(),
            });
        }
        let plane = h * w_px;
        let w = Matrix::from_vec(n_in, n_out, self.value(weights).data().to_vec())?;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(batch * n_out * plane);
        let mut samples = Vec::with_capacity(batch);
        for n in 0..batch {
            let f = Matrix::from_vec(n_in, plane, x[n * n_in * plane..(n + 1) * n_in * plane].to_vec())?;
            let g = gram(&f)?;
            let mut logits = Matrix::zeros(n_in, n_out);
            let mut last = None;
            for it in 1..iterations {
                let c = coupling_softmax(&logits);
                if let Some(t) = trace.as_deref_mut() {
                    t.push(c.clone());
                }
                let step = kernel_step(&g, &w, &c)?;
                apply_evidence(&mut logits, &step);
                if it == iterations - 1 && grad_mode == GradMode::Last {
                    last = Some(ConvLastStep {
                        prev_couplings: c,
                        gram: g.clone(),
                        u: step.u,
                        agreement: step.agreement,
                        norm_sq: step.norm_sq,
                    });
                }
            }
            let couplings = coupling_softmax(&logits);
            if let Some(t) = trace.as_deref_mut() {
                t.push(couplings.clone());
            }
            out.extend_from_slice(combine(&f, &w, &couplings).as_slice());
            samples.push(ConvSample { couplings, last });
        }
        let value = Tensor::new(vec![batch, n_out, h, w_px], out)?;
        Ok(self.record(
            value,
            vec![input, weights],
            Box::new(Conv1x1CapsuleFn {
                samples,
                n_in,
                n_out,
                plane,
            }),
        ))
    }

    /// Unrouted 1x1 convolution `g_j = sum_i K[i][j] f_i` with the same
    /// `I x J` weight layout as the routed layer.
    pub fn conv1x1_plain(&mut self, input: Var, weights: Var) -> Result<Var> {
        let (batch, n_in, h, w_px) = self.value(input).nchw()?;
        let n_out = match self.dims(weights) {
            &[a, b] if a == n_in => b,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv1x1_plain",
                    lhs: self.dims(input).to_vec(),
                    rhs: self.dims(weights).to_vec(),
                })
            }
        };
        let plane = h * w_px;
        let w = Matrix::from_vec(n_in, n_out, self.value(weights).data().to_vec())?;
        let ones = Matrix::from_fn(n_in, n_out, |_, _| 1.0);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(batch * n_out * plane);
        for n in 0..batch {
            let f = Matrix::from_vec(n_in, plane, x[n * n_in * plane..(n + 1) * n_in * plane].to_vec())?;
            out.extend_from_slice(combine(&f, &w, &ones).as_slice());
        }
        let value = Tensor::new(vec![batch, n_out, h, w_px], out)?;
        Ok(self.record(
            value,
            vec![input, weights],
            Box::new(Conv1x1PlainFn { n_in, n_out, plane }),
        ))
    }

    /// Groups `dim` consecutive channels at each pixel into one capsule:
    /// `N x C x H x W` becomes `N x (H*W*C/dim) x dim`.
    pub fn primary_capsules(&mut self, input: Var, dim: usize) -> Result<Var> {
        let (batch, c, h, w) = self.value(input).nchw()?;
        let per_sample = capsule_permutation(c, h, w, dim)?;
        let len = c * h * w;
        let perm: Vec<usize> = (0..batch)
            .flat_map(|n| per_sample.iter().map(move |&p| n * len + p))
            .collect();
        let x = self.value(input).data();
        let data = perm.iter().map(|&p| x[p]).collect();
        let value = Tensor::new(vec![batch, h * w * (c / dim), dim], data)?;
        Ok(self.record(value, vec![input], Box::new(CapsuleReshapeFn { perm })))
    }

    /// Squashes every capsule (last axis) of a rank-3 tensor.
    pub fn squash_capsules(&mut self, input: Var) -> Result<Var> {
        let dim = *self.dims(input).last().ok_or_else(|| invalid("squash of a scalar"))?;
        let x = self.value(input);
        let mut data = Vec::with_capacity(x.numel());
        for v in x.data().chunks(dim) {
            data.extend(squash(v));
        }
        let value = Tensor::new(x.dims().to_vec(), data)?;
        Ok(self.record(value, vec![input], Box::new(SquashCapsulesFn { dim })))
    }

    /// Routing-by-agreement from `N x n_in x d_in` capsules to squashed
    /// `N x n_out x d_out` class capsules.
    pub fn fc_capsule_routing(
        &mut self,
        input: Var,
        weights: Var,
        iterations: usize,
        grad_mode: GradMode,
    ) -> Result<Var> {
        self.fc_capsule_routing_traced(input, weights, iterations, grad_mode, None)
    }

    /// As [`Tape::fc_capsule_routing`], appending the coupling matrix of
    /// every iteration and sample to `trace`.
    pub fn fc_capsule_routing_traced(
        &mut self,
        input: Var,
        weights: Var,
        iterations: usize,
        grad_mode: GradMode,
        mut trace: Option<&mut Vec<Matrix>>,
    ) -> Result<Var> {
        if iterations < 1 {
            return Err(invalid("routing needs at least one iteration"));
        }
        let (batch, n_in, n_out, d_in, d_out) = fc_dims(self, input, weights, "fc_capsule_routing")?;
        let dims = (n_in, n_out, d_in, d_out);
        let u = self.value(input).data();
        let w = self.value(weights).data();
        let mut out = Vec::with_capacity(batch * n_out * d_out);
        let mut samples = Vec::with_capacity(batch);
        for n in 0..batch {
            let pred = fc_predictions(&u[n * n_in * d_in..(n + 1) * n_in * d_in], w, dims);
            let mut logits = Matrix::zeros(n_in, n_out);
            let mut last = None;
            for it in 1..iterations {
                let c = coupling_softmax(&logits);
                if let Some(t) = trace.as_deref_mut() {
                    t.push(c.clone());
                }
                let s = fc_combine(&pred, &c, d_out);
                let v = fc_squash_rows(&s);
                fc_agreement(&mut logits, &pred, &v);
                if it == iterations - 1 && grad_mode == GradMode::Last {
                    last = Some(FcLastStep {
                        prev_couplings: c,
                        prev_s: s,
                        prev_v: v,
                    });
                }
            }
            let couplings = coupling_softmax(&logits);
            if let Some(t) = trace.as_deref_mut() {
                t.push(couplings.clone());
            }
            let s = fc_combine(&pred, &couplings, d_out);
            out.extend_from_slice(fc_squash_rows(&s).as_slice());
            samples.push(FcSample {
                pred,
                couplings,
                s,
                last,
            });
        }
        let value = Tensor::new(vec![batch, n_out, d_out], out)?;
        Ok(self.record(value, vec![input, weights], Box::new(FcCapsuleFn { samples, dims })))
    }

    /// Unrouted class capsules `s_j = sum_i W[i][j]^T u_i` (not squashed).
    pub fn fc_capsule_linear(&mut self, input: Var, weights: Var) -> Result<Var> {
        let (batch, n_in, n_out, d_in, d_out) = fc_dims(self, input, weights, "fc_capsule_linear")?;
        let dims = (n_in, n_out, d_in, d_out);
        let u = self.value(input).data();
        let w = self.value(weights).data();
        let ones = Matrix::from_fn(n_in, n_out, |_, _| 1.0);
        let mut out = Vec::with_capacity(batch * n_out * d_out);
        for n in 0..batch {
            let pred = fc_predictions(&u[n * n_in * d_in..(n + 1) * n_in * d_in], w, dims);
            out.extend_from_slice(fc_combine(&pred, &ones, d_out).as_slice());
        }
        let value = Tensor::new(vec![batch, n_out, d_out], out)?;
        Ok(self.record(value, vec![input, weights], Box::new(FcLinearFn { dims })))
    }

    /// L2 norm of each capsule: `N x J x D` becomes `N x J`.
    pub fn capsule_norms(&mut self, input: Var) -> Result<Var> {
        let (batch, n_caps, dim) = match self.dims(input) {
            &[b, n, d] => (b, n, d),
            other => return Err(invalid(format!("capsule_norms expects rank 3, got {other:?}"))),
        };
        let data = self
            .value(input)
            .data()
            .chunks(dim)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::new(vec![batch, n_caps], data)?;
        Ok(self.record(value, vec![input], Box::new(CapsuleNormFn { dim })))
    }
}
