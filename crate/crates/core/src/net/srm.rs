//! Spatial reduction: collapses `(C, T', H', W')` to a `(C, T')` sequence.

use serde::{Deserialize, Serialize};

use super::tensor::{shape_err, NetError, Param, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SrmMode {
    #[default]
    Avg,
    Max,
    /// Learned per-channel linear map over a 4x4 grid.
    Conv,
}

pub const CONV_GRID: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialReduction<T> {
    pub mode: SrmMode,
    /// `(C, 16)` and `(C,)`, present in conv mode only.
    pub weight: Option<Param<T>>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> SpatialReduction<T> {
    /// Conv-mode weights start as a uniform average.
    pub fn new(mode: SrmMode, channels: usize) -> Self {
        let cells = CONV_GRID * CONV_GRID;
        let (weight, bias) = match mode {
            SrmMode::Conv => (
                Some(Param::new(
                    "srm.weight",
                    Tensor::full(&[channels, cells], T::one() / T::from_usize_lossy(cells)),
                )),
                Some(Param::new("srm.bias", Tensor::zeros(&[channels]))),
            ),
            _ => (None, None),
        };
        Self { mode, weight, bias }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize), NetError> {
        if x.shape().len() != 4 {
            return Err(shape_err("srm", &[0, 0, CONV_GRID, CONV_GRID], x.shape()));
        }
        let (c, t, cells) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        if cells == 0 {
            return Err(shape_err("srm", &[c, t, 1, 1], x.shape()));
        }
        if self.mode == SrmMode::Conv {
            let w = self.weight.as_ref().expect("conv weights");
            if x.dim(2) != CONV_GRID || x.dim(3) != CONV_GRID || w.value.dim(0) != c {
                return Err(shape_err(
                    "srm conv",
                    &[w.value.dim(0), t, CONV_GRID, CONV_GRID],
                    x.shape(),
                ));
            }
        }
        Ok((c, t, cells))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let (c, t, cells) = self.check(x)?;
        let mut out = Tensor::zeros(&[c, t]);
        let data = x.data();
        for ch in 0..c {
            for ti in 0..t {
                let grid = &data[(ch * t + ti) * cells..][..cells];
                out.data_mut()[ch * t + ti] = match self.mode {
                    SrmMode::Avg => grid.iter().copied().sum::<T>() / T::from_usize_lossy(cells),
                    SrmMode::Max => grid.iter().copied().fold(T::neg_infinity(), T::max),
                    SrmMode::Conv => {
                        let w = self.weight.as_ref().unwrap().value.row(ch);
                        let b = self.bias.as_ref().unwrap().value.data()[ch];
                        grid.iter().zip(w).map(|(&g, &wv)| g * wv).sum::<T>() + b
                    }
                };
            }
        }
        Ok(out)
    }

    /// Returns the input gradient; accumulates conv-mode parameter gradients.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let (c, t, cells) = self.check(x)?;
        if grad_out.shape() != [c, t] {
            return Err(shape_err("srm backward", &[c, t], grad_out.shape()));
        }
        let mut gx = Tensor::zeros(x.shape());
        let data = x.data();
        for ch in 0..c {
            for ti in 0..t {
                let g = grad_out.data()[ch * t + ti];
                let base = (ch * t + ti) * cells;
                let grid = &data[base..base + cells];
                let gxs = &mut gx.data_mut()[base..base + cells];
                match self.mode {
                    SrmMode::Avg => {
                        let share = g / T::from_usize_lossy(cells);
                        gxs.iter_mut().for_each(|v| *v = share);
                    }
                    SrmMode::Max => {
                        let mut arg = 0;
                        for (i, &v) in grid.iter().enumerate() {
                            if v > grid[arg] {
                                arg = i;
                            }
                        }
                        gxs[arg] = g;
                    }
                    SrmMode::Conv => {
                        let w = self.weight.as_mut().unwrap();
                        for i in 0..cells {
                            gxs[i] = g * w.value.data()[ch * cells + i];
                        }
                        if !w.frozen {
                            let gw = w.grad.row_mut(ch);
                            for (gwv, &xv) in gw.iter_mut().zip(grid) {
                                *gwv += g * xv;
                            }
                        }
                        let b = self.bias.as_mut().unwrap();
                        if !b.frozen {
                            b.grad.data_mut()[ch] += g;
                        }
                    }
                }
            }
        }
        Ok(gx)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.weight.iter().chain(self.bias.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.weight.iter_mut().chain(self.bias.iter_mut()).collect()
    }
}
