use super::conv::{conv2d_output_size, Padding};
use super::{Function, Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

enum PoolBackward {
    /// Flat input index of the winning element per output cell.
    Max(Vec<usize>),
    /// Contributing input indices per output cell (padding cells excluded).
    Avg { windows: Vec<Vec<usize>> },
}

struct PoolFn {
    routes: PoolBackward,
}

impl Function for PoolFn {
    fn name(&self) -> &'static str {
        match self.routes {
            PoolBackward::Max(_) => "max_pool2d",
            PoolBackward::Avg { .. } => "avg_pool2d",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; inputs[0].numel()];
        match &self.routes {
            PoolBackward::Max(argmax) => {
                for (&src, g) in argmax.iter().zip(grad_out) {
                    dx[src] += g;
                }
            }
            PoolBackward::Avg { windows } => {
                for (win, g) in windows.iter().zip(grad_out) {
                    let share = g / win.len() as f64;
                    for &src in win {
                        dx[src] += share;
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

impl Tape {
    /// Max or average pooling over square windows. Padding cells never win a
    /// max and are excluded from an average's denominator.
    pub fn pool2d(&mut self, input: Var, mode: PoolMode, size: usize, stride: usize, padding: Padding) -> Result<Var> {
        let (batch, channels, in_h, in_w) = self.value(input).nchw()?;
        if size == 0 || stride == 0 {
            return Err(invalid("pool size and stride must be >= 1"));
        }
        if size > in_h || size > in_w {
            return Err(invalid(format!("pool window {size} larger than input {in_h}x{in_w}")));
        }
        let (out_h, pad_top) = conv2d_output_size(in_h, size, stride, padding)?;
        let (out_w, pad_left) = conv2d_output_size(in_w, size, stride, padding)?;
        let x = self.value(input).data();
        let cells = batch * channels * out_h * out_w;
        let mut out = Vec::with_capacity(cells);
        let mut argmax = Vec::new();
        let mut windows = Vec::new();
        let mut window = Vec::with_capacity(size * size);
        for plane in 0..batch * channels {
            let base = plane * in_h * in_w;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    window.clear();
                    for ky in 0..size {
                        let iy = (oy * stride + ky) as isize - pad_top as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..size {
                            let ix = (ox * stride + kx) as isize - pad_left as isize;
                            if ix >= 0 && ix < in_w as isize {
                                window.push(base + iy as usize * in_w + ix as usize);
                            }
                        }
                    }
                    match mode {
                        PoolMode::Max => {
                            let mut best = window[0];
                            for &idx in &window[1..] {
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                            out.push(x[best]);
                            argmax.push(best);
                        }
                        PoolMode::Avg => {
                            let s: f64 = window.iter().map(|&i| x[i]).sum();
                            out.push(s / window.len() as f64);
                            windows.push(window.clone());
                        }
                    }
                }
            }
        }
        let routes = match mode {
            PoolMode::Max => PoolBackward::Max(argmax),
            PoolMode::Avg => PoolBackward::Avg { windows },
        };
        let value = Tensor::new(vec![batch, channels, out_h, out_w], out)?;
        Ok(self.record(value, vec![input], Box::new(PoolFn { routes })))
    }
}
