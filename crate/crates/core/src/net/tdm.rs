//! Temporal downsampling: stacked stride-2 convolutions that halve the
//! sequence length per level.

use rand::Rng;

use super::conv::Conv1d;
use super::tensor::{relu_backward_inplace, relu_inplace, NetError, Param, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalDownsample<T> {
    pub convs: Vec<Conv1d<T>>,
}

impl<T: Scalar> TemporalDownsample<T> {
    pub fn new<R: Rng>(in_channels: usize, channels: usize, layers: usize, rng: &mut R) -> Self {
        let convs = (0..layers)
            .map(|i| {
                let c_in = if i == 0 { in_channels } else { channels };
                Conv1d::kaiming(&format!("tdm.{i}"), c_in, channels, 3, 2, 1, rng)
            })
            .collect();
        Self { convs }
    }

    /// Returns `layers + 1` levels, the first being the input itself.
    pub fn forward(&self, seq: &Tensor<T>) -> Result<Vec<Tensor<T>>, NetError> {
        let factor = 1usize << self.convs.len();
        if seq.shape().len() != 2 || seq.dim(1) % factor != 0 || seq.dim(1) == 0 {
            return Err(NetError::Config(format!(
                "sequence length {:?} must be a positive multiple of {factor}",
                seq.shape().get(1)
            )));
        }
        let mut levels = Vec::with_capacity(self.convs.len() + 1);
        levels.push(seq.clone());
        for conv in &self.convs {
            let mut next = conv.forward(levels.last().unwrap())?;
            relu_inplace(&mut next);
            levels.push(next);
        }
        Ok(levels)
    }

    /// `grads[l]` is the gradient flowing into level `l` from the neck; the
    /// result is the gradient with respect to the input sequence.
    pub fn backward(
        &mut self,
        levels: &[Tensor<T>],
        mut grads: Vec<Tensor<T>>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>, NetError> {
        for k in (0..self.convs.len()).rev() {
            let mut g = std::mem::take(&mut grads[k + 1]);
            relu_backward_inplace(&levels[k + 1], &mut g);
            let need = k > 0 || need_input_grad;
            if let Some(gx) = self.convs[k].backward(&levels[k], &g, need)? {
                grads[k].add_assign(&gx);
            }
        }
        Ok(need_input_grad.then(|| grads.swap_remove(0)))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}
