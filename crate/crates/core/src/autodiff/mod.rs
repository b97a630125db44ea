//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every forward operator appends one node holding its output value and a
//! [`Function`] that knows the local adjoint rule. [`Tape::backward`] walks the
//! nodes in reverse index order, so the accumulation order (and therefore the
//! floating-point result) is fixed for a given tape.

mod conv;
mod elementwise;
mod norm;
mod pool;

pub use conv::{conv2d_output_size, Padding};
pub use norm::{BatchNormState, NormMode};
pub use pool::PoolMode;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local adjoint rule of a recorded operation.
pub trait Function {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, or `None` where the op does not
    /// propagate to that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node reached by a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `var`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; like.numel()])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input; gradients flow to it only if `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            func: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant; never receives gradients.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.set_requires_grad(false);
        self.leaf(value)
    }

    /// Appends the output of an operation. Used by the op modules and by
    /// layers defined outside this module (capsule routing).
    pub fn record(&mut self, value: Tensor, inputs: Vec<Var>, func: Box<dyn Function>) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            inputs,
            func: Some(func),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn dims(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.dims()
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].func.as_ref().map_or("leaf", |f| f.name())
    }

    /// Propagates adjoints from a scalar `loss` back to every node that
    /// depends on a `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got dims {:?}",
                loss_value.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(func) = node.func.as_ref() else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let local = func.backward(&inputs, &node.value, &grad_out);
            grads[idx] = Some(grad_out);
            for (input, g) in node.inputs.iter().zip(local) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    pub(crate) fn check_same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.dims(a).to_vec(),
                rhs: self.dims(b).to_vec(),
            });
        }
        Ok(())
    }
}

/// Largest coordinate-wise relative disagreement between the tape gradient of
/// `f` at `x` and a central finite difference with step `h`.
///
/// `f` builds a scalar on the given tape from the leaf it is handed.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(leaf, x);

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point);
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![3], vec![1.0, -2.0, 5.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![3], vec![1.0, 2.0, 3.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_twice_is_bitwise_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.37).sin()).with_requires_grad(true));
        let k = tape.leaf(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.11).cos()).with_requires_grad(true));
        let y = tape.conv2d(x, k, 1, Padding::Same).unwrap();
        let r = tape.relu(y);
        let s = tape.sum(r);
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0).with_requires_grad(true));
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 3.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn finite_diff_linear_and_quadratic() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let linear = finite_diff_check(
            |t, x| {
                let c = t.constant(Tensor::from_fn(&[5], |i| 0.5 + i as f64));
                let p = t.mul(x, c)?;
                Ok(t.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(linear <= 1e-10, "linear err {linear}");
        let quad = finite_diff_check(
            |t, x| {
                let p = t.mul(x, x)?;
                Ok(t.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(quad <= 1e-8, "quadratic err {quad}");
    }
}
