//! Top-down temporal feature pyramid: pointwise laterals, nearest-neighbour
//! x2 upsampling with elementwise add, kernel-3 smoothing per level.

use rand::Rng;

use super::conv::Conv1d;
use super::tensor::{shape_err, NetError, Param, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPyramid<T> {
    pub lateral: Vec<Conv1d<T>>,
    pub smooth: Vec<Conv1d<T>>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidTrace<T> {
    pub merged: Vec<Tensor<T>>,
    pub outputs: Vec<Tensor<T>>,
}

fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, t) = (x.dim(0), x.dim(1));
    let mut out = Tensor::zeros(&[c, 2 * t]);
    for ch in 0..c {
        let src = x.row(ch);
        for (i, v) in out.row_mut(ch).iter_mut().enumerate() {
            *v = src[i / 2];
        }
    }
    out
}

fn upsample2_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (c, t) = (g.dim(0), g.dim(1) / 2);
    let mut out = Tensor::zeros(&[c, t]);
    for ch in 0..c {
        let src = g.row(ch);
        for (i, v) in out.row_mut(ch).iter_mut().enumerate() {
            *v = src[2 * i] + src[2 * i + 1];
        }
    }
    out
}

impl<T: Scalar> TemporalPyramid<T> {
    pub fn new<R: Rng>(in_channels: &[usize], channels: usize, rng: &mut R) -> Self {
        let lateral = in_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| Conv1d::kaiming(&format!("tfpn.lateral.{l}"), c, channels, 1, 1, 0, rng))
            .collect();
        let smooth = (0..in_channels.len())
            .map(|l| Conv1d::kaiming(&format!("tfpn.smooth.{l}"), channels, channels, 3, 1, 1, rng))
            .collect();
        Self { lateral, smooth }
    }

    pub fn forward(&self, levels: &[Tensor<T>]) -> Result<PyramidTrace<T>, NetError> {
        let n = self.lateral.len();
        if levels.len() != n {
            return Err(shape_err("tfpn", &[n], &[levels.len()]));
        }
        let mut merged: Vec<Tensor<T>> = vec![Tensor::default(); n];
        for l in (0..n).rev() {
            let mut m = self.lateral[l].forward(&levels[l])?;
            if l + 1 < n {
                let up = upsample2(&merged[l + 1]);
                if up.shape() != m.shape() {
                    return Err(shape_err("tfpn merge", m.shape(), up.shape()));
                }
                m.add_assign(&up);
            }
            merged[l] = m;
        }
        let outputs = merged
            .iter()
            .zip(&self.smooth)
            .map(|(m, s)| s.forward(m))
            .collect::<Result<_, _>>()?;
        Ok(PyramidTrace { merged, outputs })
    }

    /// Returns gradients for every input level.
    pub fn backward(
        &mut self,
        levels: &[Tensor<T>],
        trace: &PyramidTrace<T>,
        grad_outputs: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>, NetError> {
        let n = self.lateral.len();
        let mut carried: Option<Tensor<T>> = None;
        let mut grads = Vec::with_capacity(n);
        for l in 0..n {
            let mut gm = self.smooth[l]
                .backward(&trace.merged[l], &grad_outputs[l], true)?
                .expect("input grad requested");
            if let Some(c) = carried.take() {
                gm.add_assign(&upsample2_backward(&c));
            }
            let gl = self.lateral[l]
                .backward(&levels[l], &gm, true)?
                .expect("input grad requested");
            grads.push(gl);
            carried = Some(gm);
        }
        Ok(grads)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.lateral
            .iter()
            .chain(&self.smooth)
            .flat_map(|c| c.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.lateral
            .iter_mut()
            .chain(self.smooth.iter_mut())
            .flat_map(|c| c.params_mut())
            .collect()
    }
}
