use super::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct AddFn;

impl Function for AddFn {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad_out.to_vec()), Some(grad_out.to_vec())]
    }
}

struct MulFn;

impl Function for MulFn {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = grad_out.iter().zip(b).map(|(g, b)| g * b).collect();
        let gb = grad_out.iter().zip(a).map(|(g, a)| g * a).collect();
        vec![Some(ga), Some(gb)]
    }
}

struct ScaleFn(f64);

impl Function for ScaleFn {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad_out.iter().map(|g| g * self.0).collect())]
    }
}

struct SumFn;

impl Function for SumFn {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad_out[0]; inputs[0].numel()])]
    }
}

struct ReluFn;

impl Function for ReluFn {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad_out)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(g)]
    }
}

struct ReshapeFn;

impl Function for ReshapeFn {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad_out.to_vec())]
    }
}

/// Channel concatenation of NCHW tensors; remembers each input's width.
struct ConcatFn {
    channels: Vec<usize>,
    batch: usize,
    plane: usize,
}

impl Function for ConcatFn {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.channels.iter().sum();
        let mut out = Vec::with_capacity(self.channels.len());
        let mut offset = 0;
        for &c in &self.channels {
            let mut g = Vec::with_capacity(self.batch * c * self.plane);
            for n in 0..self.batch {
                let start = (n * total + offset) * self.plane;
                g.extend_from_slice(&grad_out[start..start + c * self.plane]);
            }
            out.push(Some(g));
            offset += c;
        }
        out
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_dims("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.dims(a).to_vec(), data)?;
        Ok(self.record(value, vec![a, b], Box::new(AddFn)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_dims("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.dims(a).to_vec(), data)?;
        Ok(self.record(value, vec![a, b], Box::new(MulFn)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let value = Tensor::from_fn(v.dims(), |i| v.data()[i] * factor);
        self.record(value, vec![a], Box::new(ScaleFn(factor)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(total), vec![a], Box::new(SumFn))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::from_fn(v.dims(), |i| v.data()[i].max(0.0));
        self.record(value, vec![a], Box::new(ReluFn))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(dims)?;
        Ok(self.record(value, vec![a], Box::new(ReshapeFn)))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).nchw()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).nchw()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.dims(first).to_vec(),
                    rhs: self.dims(p).to_vec(),
                });
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], data)?;
        Ok(self.record(
            value,
            parts.to_vec(),
            Box::new(ConcatFn {
                channels,
                batch: n,
                plane,
            }),
        ))
    }
}
