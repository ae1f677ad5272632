//! Shared prediction head: a classification and a regression branch of
//! stacked kernel-3 convolutions, applied with one weight set to every level.
//!
//! Output channel layout: classification row `a * K + k` scores class `k` for
//! anchor scale `a`; regression rows `2a` and `2a + 1` hold `(dc, dl)`.

use rand::Rng;

use super::conv::Conv1d;
use super::tensor::{relu_backward_inplace, relu_inplace, NetError, Param, Tensor};
use crate::scalar::Scalar;

/// Standard deviation of the output layers' initial weights.
pub const OUTPUT_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead<T> {
    pub cls: Vec<Conv1d<T>>,
    pub cls_out: Conv1d<T>,
    pub reg: Vec<Conv1d<T>>,
    pub reg_out: Conv1d<T>,
}

/// Activations of one branch: input followed by every hidden output.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchTrace<T> {
    pub acts: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLevelOutput<T> {
    pub cls: Tensor<T>,
    pub reg: Tensor<T>,
    pub cls_trace: BranchTrace<T>,
    pub reg_trace: BranchTrace<T>,
}

fn branch_forward<T: Scalar>(
    hidden: &[Conv1d<T>],
    out: &Conv1d<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, BranchTrace<T>), NetError> {
    let mut acts = Vec::with_capacity(hidden.len() + 1);
    acts.push(x.clone());
    for conv in hidden {
        let mut y = conv.forward(acts.last().unwrap())?;
        relu_inplace(&mut y);
        acts.push(y);
    }
    let y = out.forward(acts.last().unwrap())?;
    Ok((y, BranchTrace { acts }))
}

fn branch_backward<T: Scalar>(
    hidden: &mut [Conv1d<T>],
    out: &mut Conv1d<T>,
    trace: &BranchTrace<T>,
    grad: &Tensor<T>,
) -> Result<Tensor<T>, NetError> {
    let mut g = out
        .backward(trace.acts.last().unwrap(), grad, true)?
        .expect("input grad requested");
    for k in (0..hidden.len()).rev() {
        relu_backward_inplace(&trace.acts[k + 1], &mut g);
        g = hidden[k]
            .backward(&trace.acts[k], &g, true)?
            .expect("input grad requested");
    }
    Ok(g)
}

impl<T: Scalar> PredictionHead<T> {
    pub fn new<R: Rng>(
        channels: usize,
        convs: usize,
        num_classes: usize,
        anchors: usize,
        prior: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = |name: &str, rng: &mut R| -> Vec<Conv1d<T>> {
            (0..convs)
                .map(|i| Conv1d::kaiming(&format!("tpm.{name}.{i}"), channels, channels, 3, 1, 1, rng))
                .collect()
        };
        let cls = hidden("cls", rng);
        let mut cls_out = Conv1d::normal("tpm.cls_out", channels, num_classes * anchors, 3, OUTPUT_INIT_STD, rng);
        let prior_bias = T::lit(-((1.0 - prior) / prior).ln());
        cls_out.bias.value.fill(prior_bias);
        let reg = hidden("reg", rng);
        let reg_out = Conv1d::normal("tpm.reg_out", channels, 2 * anchors, 3, OUTPUT_INIT_STD, rng);
        Self {
            cls,
            cls_out,
            reg,
            reg_out,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<HeadLevelOutput<T>, NetError> {
        let (cls, cls_trace) = branch_forward(&self.cls, &self.cls_out, x)?;
        let (reg, reg_trace) = branch_forward(&self.reg, &self.reg_out, x)?;
        Ok(HeadLevelOutput {
            cls,
            reg,
            cls_trace,
            reg_trace,
        })
    }

    /// Gradient with respect to the level input.
    pub fn backward(
        &mut self,
        level: &HeadLevelOutput<T>,
        grad_cls: &Tensor<T>,
        grad_reg: &Tensor<T>,
    ) -> Result<Tensor<T>, NetError> {
        let mut g = branch_backward(&mut self.cls, &mut self.cls_out, &level.cls_trace, grad_cls)?;
        let gr = branch_backward(&mut self.reg, &mut self.reg_out, &level.reg_trace, grad_reg)?;
        g.add_assign(&gr);
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.cls
            .iter()
            .chain(std::iter::once(&self.cls_out))
            .chain(&self.reg)
            .chain(std::iter::once(&self.reg_out))
            .flat_map(|c| c.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.cls
            .iter_mut()
            .chain(std::iter::once(&mut self.cls_out))
            .chain(self.reg.iter_mut())
            .chain(std::iter::once(&mut self.reg_out))
            .flat_map(|c| c.params_mut())
            .collect()
    }
}
