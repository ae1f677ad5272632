//! Desk backbone: fixed spatio-temporal average pooling followed by a learned
//! pointwise projection, producing the `(C, T/8, H/32, W/32)` feature map the
//! spatial reduction expects.

use rand::Rng;

use super::conv::Conv1d;
use super::tensor::{relu_backward_inplace, relu_inplace, shape_err, NetError, Param, Tensor};
use crate::scalar::Scalar;

pub const TEMPORAL_POOL: usize = 8;
pub const SPATIAL_POOL: usize = 32;
const PIXEL_HALF_RANGE: f64 = 127.5;

/// Average pools `(3, T, H, W)` pixels by 8 in time and 32 in space. Spatial
/// windows use ceil mode; a partial border window averages only the pixels it covers.
/// Averages are mapped from `[0, 255]` to `[-1, 1]`.
pub fn pool_pixels<T: Scalar>(
    data: &[f32],
    channels: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>, NetError> {
    if frames % TEMPORAL_POOL != 0 || frames == 0 {
        return Err(NetError::Config(format!(
            "clip length {frames} is not a positive multiple of {TEMPORAL_POOL}"
        )));
    }
    if data.len() != channels * frames * height * width || height == 0 || width == 0 {
        return Err(shape_err(
            "pool_pixels",
            &[channels, frames, height, width],
            &[data.len()],
        ));
    }
    let tp = frames / TEMPORAL_POOL;
    let hp = height.div_ceil(SPATIAL_POOL);
    let wp = width.div_ceil(SPATIAL_POOL);
    let mut sums = vec![0f64; channels * tp * hp * wp];
    for c in 0..channels {
        for t in 0..frames {
            let ot = t / TEMPORAL_POOL;
            for h in 0..height {
                let oh = h / SPATIAL_POOL;
                let row = &data[((c * frames + t) * height + h) * width..][..width];
                let base = ((c * tp + ot) * hp + oh) * wp;
                for (ow, chunk) in row.chunks(SPATIAL_POOL).enumerate() {
                    sums[base + ow] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[channels, tp, hp, wp]);
    for (i, (o, s)) in out.data_mut().iter_mut().zip(&sums).enumerate() {
        let oh = (i / wp) % hp;
        let ow = i % wp;
        let ch = SPATIAL_POOL.min(height - oh * SPATIAL_POOL);
        let cw = SPATIAL_POOL.min(width - ow * SPATIAL_POOL);
        *o = T::lit(s / (TEMPORAL_POOL * ch * cw) as f64 / PIXEL_HALF_RANGE - 1.0);
    }
    Ok(out)
}

/// Pointwise `3 -> C_b` projection with ReLU, applied to every pooled cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub conv: Conv1d<T>,
}

impl<T: Scalar> Projection<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, frozen: bool, rng: &mut R) -> Self {
        let mut conv = Conv1d::kaiming("backbone.proj", in_channels, out_channels, 1, 1, 0, rng);
        conv.weight.frozen = frozen;
        conv.bias.frozen = frozen;
        Self { conv }
    }

    fn flat(x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let s = x.shape();
        x.clone().reshape(&[s[0], s[1] * s[2] * s[3]])
    }

    /// `(3, T', H', W') -> (C_b, T', H', W')`.
    pub fn forward(&self, pooled: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        if pooled.shape().len() != 4 {
            return Err(shape_err(
                "projection",
                &[self.conv.in_channels(), 0, 0, 0],
                pooled.shape(),
            ));
        }
        let s = pooled.shape().to_vec();
        let mut out = self.conv.forward(&Self::flat(pooled)?)?;
        relu_inplace(&mut out);
        out.reshape(&[self.conv.out_channels(), s[1], s[2], s[3]])
    }

    pub fn backward(&mut self, pooled: &Tensor<T>, output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(), NetError> {
        if self.conv.weight.frozen && self.conv.bias.frozen {
            return Ok(());
        }
        let mut g = Self::flat(grad_out)?;
        relu_backward_inplace(&Self::flat(output)?, &mut g);
        self.conv.backward(&Self::flat(pooled)?, &g, false)?;
        Ok(())
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        self.conv.params()
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        self.conv.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_shape_uses_ceil_mode() {
        let data = vec![255.0f32; 3 * 16 * 112 * 100];
        let p = pool_pixels::<f64>(&data, 3, 16, 112, 100).unwrap();
        assert_eq!(p.shape(), &[3, 2, 4, 4]);
        assert!(p.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(pool_pixels::<f64>(&data[..3 * 12 * 112 * 100], 3, 12, 112, 100).is_err());
    }

    #[test]
    fn partial_border_window_averages_covered_pixels() {
        // width 40: the second window covers 8 columns with value 255
        let (c, t, h, w) = (1, 8, 1, 40);
        let data: Vec<f32> = (0..c * t * h * w)
            .map(|i| if i % w >= 32 { 255.0 } else { 0.0 })
            .collect();
        let p = pool_pixels::<f64>(&data, c, t, h, w).unwrap();
        assert_eq!(p.data(), &[-1.0, 1.0]);
    }
}
