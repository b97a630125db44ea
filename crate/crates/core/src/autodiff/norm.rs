use super::{Function, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

struct BatchNormFn {
    mode: NormMode,
    /// Normalized input, saved from the forward pass.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch: usize,
    channels: usize,
    plane: usize,
}

impl Function for BatchNormFn {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let (n, c, plane) = (self.batch, self.channels, self.plane);
        let count = (n * plane) as f64;
        let mut dx = vec![0.0; grad_out.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    sum_dy += grad_out[i];
                    sum_dy_xhat += grad_out[i] * self.xhat[i];
                }
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let scale = gamma[ch] * self.inv_std[ch];
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    dx[i] = match self.mode {
                        NormMode::Train => scale * (grad_out[i] - sum_dy / count - self.xhat[i] * sum_dy_xhat / count),
                        NormMode::Eval => scale * grad_out[i],
                    };
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

impl Tape {
    /// Per-channel batch normalization. In train mode the batch statistics
    /// normalize the input and are folded into `state` by exponential moving
    /// average; in eval mode the running statistics are used unchanged.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: NormMode,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        if n == 0 {
            return Err(invalid("batchnorm on an empty batch"));
        }
        for p in [gamma, beta] {
            if self.value(p).numel() != c || state.channels() != c {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    lhs: self.dims(input).to_vec(),
                    rhs: self.dims(p).to_vec(),
                });
            }
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let x = self.value(input).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = match mode {
                NormMode::Train => {
                    let mut s = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s += x[off..off + plane].iter().sum::<f64>();
                    }
                    let mean = s / count;
                    let mut v = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        v += x[off..off + plane].iter().map(|t| (t - mean) * (t - mean)).sum::<f64>();
                    }
                    let var = v / count;
                    let m = state.momentum;
                    state.running_mean[ch] = m * state.running_mean[ch] + (1.0 - m) * mean;
                    state.running_var[ch] = m * state.running_var[ch] + (1.0 - m) * var;
                    (mean, var)
                }
                NormMode::Eval => (state.running_mean[ch], state.running_var[ch]),
            };
            let is = 1.0 / (var + state.eps).sqrt();
            inv_std[ch] = is;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (x[i] - mean) * is;
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.record(
            value,
            vec![input, gamma, beta],
            Box::new(BatchNormFn {
                mode,
                xhat,
                inv_std,
                batch: n,
                channels: c,
                plane,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::finite_diff_check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn apply(x: &Tensor, gamma: f64, beta: f64, state: &mut BatchNormState, mode: NormMode) -> Tensor {
        let c = x.dims()[1];
        let mut tape = Tape::new();
        let vx = tape.leaf(x.clone());
        let vg = tape.leaf(Tensor::full(&[c], gamma));
        let vb = tape.leaf(Tensor::full(&[c], beta));
        let y = tape.batchnorm(vx, vg, vb, state, mode).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn standardized_input_passes_through() {
        let x = Tensor::new(vec![4, 1, 1, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let mut st = BatchNormState::new(1);
        let y = apply(&x, 1.0, 0.0, &mut st, NormMode::Train);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 2, 4, 4], 2.0, &mut rng);
        let y = apply(&x, 0.0, 5.0, &mut BatchNormState::new(2), NormMode::Train);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batch_statistics_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[5, 3, 4, 4], |i| 3.0 + 2.0 * ((i * 37 % 101) as f64 / 50.0 - 1.0));
        let x = Tensor::new(
            x.dims().to_vec(),
            x.data()
                .iter()
                .map(|v| v + rand::Rng::random::<f64>(&mut rng))
                .collect(),
        )
        .unwrap();
        let y = apply(&x, 1.0, 0.0, &mut BatchNormState::new(3), NormMode::Train);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..5)
                .flat_map(|b| (0..16).map(move |i| (b, i)))
                .map(|(b, i)| y.at4(b, ch, i / 4, i % 4))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut st = BatchNormState::new(1);
        apply(&x, 1.0, 0.0, &mut st, NormMode::Train);
        assert!((st.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((st.running_var[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-15);
        let before = st.clone();
        let y = apply(&x, 1.0, 0.0, &mut st, NormMode::Eval);
        assert_eq!(st, before);
        let expect = (1.0 - 0.2) / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[0, 2, 2, 2]));
        let g = tape.leaf(Tensor::zeros(&[2]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape
            .batchnorm(x, g, b, &mut BatchNormState::new(2), NormMode::Train)
            .is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let gamma = Tensor::new(vec![2], vec![0.7, 1.3]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        for mode in [NormMode::Train, NormMode::Eval] {
            let (gm, bt, ww) = (gamma.clone(), beta.clone(), w.clone());
            let loss = move |t: &mut Tape, xv: Var, gv: Var, bv: Var| -> Result<Var> {
                let mut st = BatchNormState::new(2);
                st.running_mean = vec![0.3, -0.1];
                st.running_var = vec![1.5, 0.8];
                let y = t.batchnorm(xv, gv, bv, &mut st, mode)?;
                let wv = t.constant(ww.clone());
                let p = t.mul(y, wv)?;
                let q = t.mul(p, y)?;
                Ok(t.sum(q))
            };
            let ex = finite_diff_check(
                |t, xv| {
                    let gv = t.constant(gm.clone());
                    let bv = t.constant(bt.clone());
                    loss(t, xv, gv, bv)
                },
                &x,
                1e-5,
            )
            .unwrap();
            let eg = finite_diff_check(
                |t, gv| {
                    let xv = t.constant(x.clone());
                    let bv = t.constant(bt.clone());
                    loss(t, xv, gv, bv)
                },
                &gamma,
                1e-5,
            )
            .unwrap();
            assert!(ex <= 1e-4 && eg <= 1e-4, "{mode:?}: {ex} {eg}");
        }
    }
}
