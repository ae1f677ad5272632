use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::{shape_err, NetError, Param, Tensor};
use crate::scalar::Scalar;

/// Output positions `t` whose input tap `t * stride + j - padding` is in range.
#[inline]
fn valid_range(stride: usize, padding: usize, j: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    // t * s + j >= p
    let lo = if j >= padding {
        0
    } else {
        (padding - j).div_ceil(stride)
    };
    // t * s + j - p < len_in
    let limit = len_in + padding;
    let hi = if limit > j { (limit - j).div_ceil(stride) } else { 0 };
    (lo.min(len_out), hi.min(len_out))
}

/// 1-D cross-correlation with bias over `(channels, length)` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn from_params(weight: Param<T>, bias: Param<T>, stride: usize, padding: usize) -> Self {
        assert_eq!(weight.value.shape().len(), 3, "conv weight is (out, in, k)");
        assert_eq!(bias.value.shape(), &[weight.value.dim(0)]);
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn zeros(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::from_params(
            Param::new(format!("{name}.weight"), Tensor::zeros(&[c_out, c_in, kernel])),
            Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            padding,
        )
    }

    /// Kaiming-uniform weights over the fan-in, zero bias.
    pub fn kaiming<R: Rng>(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(name, c_in, c_out, kernel, stride, padding);
        let bound = (6.0 / (c_in * kernel) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in conv.weight.value.data_mut() {
            *w = T::lit(dist.sample(rng));
        }
        conv
    }

    /// Normal weights with the given standard deviation, zero bias.
    pub fn normal<R: Rng>(name: &str, c_in: usize, c_out: usize, kernel: usize, std: f64, rng: &mut R) -> Self {
        let mut conv = Self::zeros(name, c_in, c_out, kernel, 1, kernel / 2);
        let dist = Normal::new(0.0, std).expect("positive std");
        for w in conv.weight.value.data_mut() {
            *w = T::lit(dist.sample(rng));
        }
        conv
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.dim(2)
    }

    pub fn output_len(&self, len: usize) -> usize {
        (len + 2 * self.padding).saturating_sub(self.kernel()) / self.stride + 1
    }

    #[inline]
    fn valid_range(&self, j: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        valid_range(self.stride, self.padding, j, len_in, len_out)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let (c_in, c_out, k) = (self.in_channels(), self.out_channels(), self.kernel());
        if x.shape().len() != 2 || x.dim(0) != c_in {
            return Err(shape_err("conv1d", &[c_in, 0], x.shape()));
        }
        let len_in = x.dim(1);
        if len_in + 2 * self.padding < k {
            return Err(shape_err("conv1d", &[c_in, k], x.shape()));
        }
        let len_out = self.output_len(len_in);
        let mut out = Tensor::zeros(&[c_out, len_out]);
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        for o in 0..c_out {
            let row = out.row_mut(o);
            row.iter_mut().for_each(|v| *v = b[o]);
            for i in 0..c_in {
                let xin = x.row(i);
                for j in 0..k {
                    let wv = w[(o * c_in + i) * k + j];
                    if wv == T::zero() {
                        continue;
                    }
                    let (lo, hi) = self.valid_range(j, len_in, len_out);
                    if lo >= hi {
                        continue;
                    }
                    if self.stride == 1 {
                        let src = &xin[lo + j - self.padding..hi + j - self.padding];
                        for (r, &v) in row[lo..hi].iter_mut().zip(src) {
                            *r += wv * v;
                        }
                    } else {
                        for t in lo..hi {
                            row[t] += wv * xin[t * self.stride + j - self.padding];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight and bias gradients (unless frozen) and returns the
    /// gradient with respect to `x` when `need_input_grad` is set.
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>, NetError> {
        let (c_in, c_out, k) = (self.in_channels(), self.out_channels(), self.kernel());
        let len_in = x.dim(1);
        let len_out = self.output_len(len_in);
        if grad_out.shape() != [c_out, len_out] {
            return Err(shape_err("conv1d backward", &[c_out, len_out], grad_out.shape()));
        }
        let s = self.stride;
        let p = self.padding;

        if !self.weight.frozen {
            let gw = self.weight.grad.data_mut();
            for o in 0..c_out {
                let g = grad_out.row(o);
                for i in 0..c_in {
                    let xin = x.row(i);
                    for j in 0..k {
                        let (lo, hi) = valid_range(s, p, j, len_in, len_out);
                        let mut acc = T::zero();
                        if s == 1 {
                            for (gv, &xv) in g[lo..hi].iter().zip(&xin[lo + j - p..hi + j - p]) {
                                acc += *gv * xv;
                            }
                        } else {
                            for t in lo..hi {
                                acc += g[t] * xin[t * s + j - p];
                            }
                        }
                        gw[(o * c_in + i) * k + j] += acc;
                    }
                }
            }
        }
        if !self.bias.frozen {
            let gb = self.bias.grad.data_mut();
            for (o, gbo) in gb.iter_mut().enumerate() {
                *gbo += grad_out.row(o).iter().copied().sum::<T>();
            }
        }
        if !need_input_grad {
            return Ok(None);
        }
        let w = self.weight.value.data();
        let mut gx = Tensor::zeros(&[c_in, len_in]);
        for o in 0..c_out {
            let g = grad_out.row(o);
            for i in 0..c_in {
                let gxi = gx.row_mut(i);
                for j in 0..k {
                    let wv = w[(o * c_in + i) * k + j];
                    let (lo, hi) = self.valid_range(j, len_in, len_out);
                    if s == 1 {
                        for (r, &gv) in gxi[lo + j - p..hi + j - p].iter_mut().zip(&g[lo..hi]) {
                            *r += wv * gv;
                        }
                    } else {
                        for t in lo..hi {
                            gxi[t * s + j - p] += wv * g[t];
                        }
                    }
                }
            }
        }
        Ok(Some(gx))
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(weights: &[f64], c_in: usize, c_out: usize, stride: usize, padding: usize) -> Conv1d<f64> {
        let k = weights.len() / (c_in * c_out);
        let mut c = Conv1d::zeros("c", c_in, c_out, k, stride, padding);
        c.weight.value.data_mut().copy_from_slice(weights);
        c
    }

    /// Direct evaluation of the definition, zero padding explicit.
    fn naive(c: &Conv1d<f64>, x: &Tensor<f64>) -> Vec<f64> {
        let (ci, co, k) = (c.in_channels(), c.out_channels(), c.kernel());
        let len = x.dim(1);
        let lo = c.output_len(len);
        let mut out = vec![0.0; co * lo];
        for o in 0..co {
            for t in 0..lo {
                let mut acc = c.bias.value.data()[o];
                for i in 0..ci {
                    for j in 0..k {
                        let pos = (t * c.stride + j) as isize - c.padding as isize;
                        if pos >= 0 && (pos as usize) < len {
                            acc += c.weight.value.data()[(o * ci + i) * k + j] * x.row(i)[pos as usize];
                        }
                    }
                }
                out[o * lo + t] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let c = conv(&[0.0, 1.0, 0.0], 1, 1, 1, 1);
        let x = Tensor::from_vec(&[1, 5], vec![3.0, -1.0, 2.0, 7.0, 0.5]).unwrap();
        assert_eq!(c.forward(&x).unwrap(), x);
    }

    #[test]
    fn ones_kernel() {
        let c = conv(&[1.0, 1.0, 1.0], 1, 1, 1, 1);
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(c.forward(&x).unwrap().data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn stride_two_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv1d::<f64>::kaiming("c", 4, 3, 3, 2, 1, &mut rng);
        let x = Tensor::zeros(&[4, 96]);
        assert_eq!(c.forward(&x).unwrap().shape(), &[3, 48]);
        assert!(c.forward(&Tensor::zeros(&[5, 96])).is_err());
    }

    #[test]
    fn matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, padding, k, len) in [(1, 1, 3, 9), (2, 1, 3, 10), (2, 1, 3, 7), (1, 0, 1, 6), (3, 2, 5, 11)] {
            let mut c = Conv1d::<f64>::kaiming("c", 3, 2, k, stride, padding, &mut rng);
            for b in c.bias.value.data_mut() {
                *b = rng.random_range(-1.0..1.0);
            }
            let x = Tensor::from_vec(&[3, len], (0..3 * len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let fast = c.forward(&x).unwrap();
            for (a, b) in fast.data().iter().zip(naive(&c, &x)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_weights_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = Conv1d::<f64>::kaiming("c", 2, 2, 3, 1, 1, &mut rng);
        c.weight.frozen = true;
        let x = Tensor::full(&[2, 5], 1.0);
        let g = Tensor::full(&[2, 5], 1.0);
        c.backward(&x, &g, true).unwrap();
        assert!(c.weight.grad.data().iter().all(|v| *v == 0.0));
        assert_eq!(c.bias.grad.data(), &[5.0, 5.0]);
    }
}
