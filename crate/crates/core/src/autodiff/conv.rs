use super::{Function, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; zero padding split evenly with the
    /// odd cell on the high side.
    Same,
    Valid,
}

/// Output extent and low-side padding of one spatial axis.
pub fn conv2d_output_size(input: usize, window: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 || window == 0 {
        return Err(invalid("window and stride must be >= 1"));
    }
    match padding {
        Padding::Valid => {
            if input < window {
                return Err(invalid(format!("window {window} larger than input extent {input}")));
            }
            Ok(((input - window) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + window).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one sample into a (in_c*k_h*k_w) x (out_h*out_w) patch matrix.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let cols = self.cols();
        for ci in 0..self.in_c {
            let plane = &x[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = (ci * self.k_h + ky) * self.k_w + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            *d = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let cols = self.cols();
        for ci in 0..self.in_c {
            let plane = &mut dx[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = (ci * self.k_h + ky) * self.k_w + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dFn {
    geo: Geometry,
    batch: usize,
    out_c: usize,
}

impl Function for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let geo = self.geo;
        let (x, kernel) = (inputs[0].data(), inputs[1].data());
        let (rows, cols) = (geo.rows(), geo.cols());
        let in_len = geo.in_c * geo.in_h * geo.in_w;
        let mut dx = vec![0.0; x.len()];
        let mut dk = vec![0.0; kernel.len()];
        let mut col = vec![0.0; rows * cols];
        let mut dcol = vec![0.0; rows * cols];
        for n in 0..self.batch {
            geo.im2col(&x[n * in_len..(n + 1) * in_len], &mut col);
            dcol.fill(0.0);
            let dout = &grad_out[n * self.out_c * cols..(n + 1) * self.out_c * cols];
            for oc in 0..self.out_c {
                let g = &dout[oc * cols..(oc + 1) * cols];
                let krow = &kernel[oc * rows..(oc + 1) * rows];
                let dkrow = &mut dk[oc * rows..(oc + 1) * rows];
                for r in 0..rows {
                    let c = &col[r * cols..(r + 1) * cols];
                    dkrow[r] += g.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
                    let kv = krow[r];
                    let dc = &mut dcol[r * cols..(r + 1) * cols];
                    dc.iter_mut().zip(g).for_each(|(d, gv)| *d += kv * gv);
                }
            }
            geo.col2im(&dcol, &mut dx[n * in_len..(n + 1) * in_len]);
        }
        vec![Some(dx), Some(dk)]
    }
}

impl Tape {
    /// 2-D cross-correlation of an NCHW input with an
    /// `out_c x in_c x k_h x k_w` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (batch, in_c, in_h, in_w) = self.value(input).nchw()?;
        let (out_c, k_in, k_h, k_w) = self.value(kernel).nchw()?;
        if k_in != in_c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.dims(input).to_vec(),
                rhs: self.dims(kernel).to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d stride must be >= 1"));
        }
        let (out_h, pad_top) = conv2d_output_size(in_h, k_h, stride, padding)?;
        let (out_w, pad_left) = conv2d_output_size(in_w, k_w, stride, padding)?;
        let geo = Geometry {
            in_c,
            in_h,
            in_w,
            k_h,
            k_w,
            out_h,
            out_w,
            stride,
            pad_top,
            pad_left,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let in_len = in_c * in_h * in_w;
        let mut out = vec![0.0; batch * out_c * cols];
        let mut col = vec![0.0; rows * cols];
        for n in 0..batch {
            geo.im2col(&x[n * in_len..(n + 1) * in_len], &mut col);
            let dst = &mut out[n * out_c * cols..(n + 1) * out_c * cols];
            for oc in 0..out_c {
                let o = &mut dst[oc * cols..(oc + 1) * cols];
                for (r, &kv) in k[oc * rows..(oc + 1) * rows].iter().enumerate() {
                    let c = &col[r * cols..(r + 1) * cols];
                    o.iter_mut().zip(c).for_each(|(ov, cv)| *ov += kv * cv);
                }
            }
        }
        let value = Tensor::new(vec![batch, out_c, out_h, out_w], out)?;
        Ok(self.record(value, vec![input, kernel], Box::new(Conv2dFn { geo, batch, out_c })))
    }
}

#[cfg(test)]
mod tests {
    use super::super::finite_diff_check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop cross-correlation, independent of the im2col path.
    fn conv_oracle(
        x: &Tensor,
        k: &Tensor,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
        out_h: usize,
        out_w: usize,
    ) -> Vec<f64> {
        let (n, c, h, w) = x.nchw().unwrap();
        let (oc, _, kh, kw) = k.nchw().unwrap();
        let mut out = vec![0.0; n * oc * out_h * out_w];
        for b in 0..n {
            for o in 0..oc {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad_top as isize;
                                    let ix = (ox * stride + kx) as isize - pad_left as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.at4(b, ci, iy as usize, ix as usize) * k.at4(o, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        out[((b * oc + o) * out_h + oy) * out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn run(x: &Tensor, k: &Tensor, stride: usize, padding: Padding) -> Tensor {
        let mut tape = Tape::new();
        let vx = tape.leaf(x.clone());
        let vk = tape.leaf(k.clone());
        let y = tape.conv2d(vx, vk, stride, padding).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let k = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(run(&x, &k, 1, Padding::Valid).data(), x.data());
        assert_eq!(run(&x, &k, 1, Padding::Same).data(), x.data());
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let x = Tensor::full(&[1, 1, 6, 6], 0.7);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = run(&x, &k, 1, Padding::Valid);
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        for v in y.data() {
            assert!((v - 9.0 * 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_loop_oracle_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[1, 3, 5, 5], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng);
        let y = run(&x, &k, 1, Padding::Valid);
        let expect = conv_oracle(&x, &k, 1, 0, 0, 3, 3);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_loop_oracle_same_strided() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (h, kh, stride) in [(7usize, 7usize, 2usize), (8, 9, 1), (6, 1, 2), (9, 3, 2)] {
            let x = Tensor::randn(&[2, 2, h, h], 1.0, &mut rng);
            let k = Tensor::randn(&[3, 2, kh, kh], 1.0, &mut rng);
            let y = run(&x, &k, stride, Padding::Same);
            let out = h.div_ceil(stride);
            let total = ((out - 1) * stride + kh).saturating_sub(h);
            assert_eq!(y.dims(), &[2, 3, out, out]);
            let expect = conv_oracle(&x, &k, stride, total / 2, total / 2, out, out);
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_padding_puts_odd_cell_high() {
        // in 4, window 2, stride 1: total pad 1, all of it on the high side
        assert_eq!(conv2d_output_size(4, 2, 1, Padding::Same).unwrap(), (4, 0));
        assert_eq!(conv2d_output_size(4, 3, 1, Padding::Same).unwrap(), (4, 1));
        assert_eq!(conv2d_output_size(64, 7, 2, Padding::Same).unwrap(), (32, 2));
        assert!(conv2d_output_size(2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let err = tape.conv2d(x, k, 1, Padding::Valid).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn gradient_wrt_input_and_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng);
        let loss = |t: &mut Tape, xv: Var, kv: Var| -> Result<Var> {
            let y = t.conv2d(xv, kv, 2, Padding::Same)?;
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv)?;
            Ok(t.sum(p))
        };
        let kk = k.clone();
        let ex = finite_diff_check(
            |t, xv| {
                let kv = t.constant(kk.clone());
                loss(t, xv, kv)
            },
            &x,
            1e-5,
        )
        .unwrap();
        let xx = x.clone();
        let ek = finite_diff_check(
            |t, kv| {
                let xv = t.constant(xx.clone());
                loss(t, xv, kv)
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert!(ex <= 1e-4 && ek <= 1e-4, "{ex} {ek}");
    }
}
