//! The detector network with hand-written reverse-mode gradients.

pub mod backbone;
pub mod conv;
pub mod srm;
pub mod tdm;
pub mod tensor;
pub mod tfpn;
pub mod tpm;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use self::backbone::{pool_pixels, Projection};
pub use self::conv::Conv1d;
pub use self::srm::{SpatialReduction, SrmMode};
pub use self::tdm::TemporalDownsample;
pub use self::tensor::{NetError, Param, Tensor};
pub use self::tfpn::{PyramidTrace, TemporalPyramid};
pub use self::tpm::{HeadLevelOutput, PredictionHead};

use crate::io::checkpoint::{Checkpoint, NamedTensor};
use crate::scalar::Scalar;

/// Number of stride-2 stages after the input level; five pyramid levels.
pub const TDM_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub backbone_channels: usize,
    pub tdm_channels: usize,
    pub fpn_channels: usize,
    pub head_convs: usize,
    pub num_classes: usize,
    pub anchors_per_position: usize,
    pub srm_mode: SrmMode,
    /// Freezes the backbone projection.
    pub frozen: bool,
    /// Foreground prior used to initialise the classification bias.
    pub prior: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            backbone_channels: 64,
            tdm_channels: 512,
            fpn_channels: 256,
            head_convs: 4,
            num_classes: 3,
            anchors_per_position: 5,
            srm_mode: SrmMode::Avg,
            frozen: false,
            prior: 0.01,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let dims = [
            ("backbone_channels", self.backbone_channels),
            ("tdm_channels", self.tdm_channels),
            ("fpn_channels", self.fpn_channels),
            ("num_classes", self.num_classes),
            ("anchors_per_position", self.anchors_per_position),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(NetError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(NetError::Config(format!("prior must lie in (0,1), got {}", self.prior)));
        }
        Ok(())
    }

    /// Temporal length the pyramid input must be a multiple of.
    pub fn sequence_multiple(&self) -> usize {
        1 << TDM_LAYERS
    }
}

/// Per-level raw head outputs: `cls` is `(K*A, T')`, `reg` is `(2*A, T')`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T> {
    pub cls: Vec<Tensor<T>>,
    pub reg: Vec<Tensor<T>>,
}

impl<T: Scalar> HeadOutputs<T> {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            cls: other.cls.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            reg: other.reg.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn positions(&self) -> Vec<usize> {
        self.cls.iter().map(|t| t.dim(1)).collect()
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pooled: Option<Tensor<T>>,
    projected: Option<Tensor<T>>,
    levels: Vec<Tensor<T>>,
    pyramid: PyramidTrace<T>,
    heads: Vec<HeadLevelOutput<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn outputs(&self) -> HeadOutputs<T> {
        HeadOutputs {
            cls: self.heads.iter().map(|h| h.cls.clone()).collect(),
            reg: self.heads.iter().map(|h| h.reg.clone()).collect(),
        }
    }

    /// The `(C_b, T/8)` sequence entering the downsampling stage.
    pub fn sequence(&self) -> &Tensor<T> {
        &self.levels[0]
    }

    /// Temporal sizes of the five pyramid levels.
    pub fn pyramid_sizes(&self) -> Vec<usize> {
        self.pyramid.outputs.iter().map(|t| t.dim(1)).collect()
    }

    pub fn pyramid(&self) -> &[Tensor<T>] {
        &self.pyramid.outputs
    }

    pub fn tdm_levels(&self) -> &[Tensor<T>] {
        &self.levels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector<T> {
    pub cfg: NetConfig,
    pub projection: Projection<T>,
    pub srm: SpatialReduction<T>,
    pub tdm: TemporalDownsample<T>,
    pub tfpn: TemporalPyramid<T>,
    pub head: PredictionHead<T>,
}

impl<T: Scalar> Detector<T> {
    pub fn new<R: Rng>(cfg: &NetConfig, rng: &mut R) -> Result<Self, NetError> {
        cfg.validate()?;
        let projection = Projection::new(3, cfg.backbone_channels, cfg.frozen, rng);
        let srm = SpatialReduction::new(cfg.srm_mode, cfg.backbone_channels);
        let tdm = TemporalDownsample::new(cfg.backbone_channels, cfg.tdm_channels, TDM_LAYERS, rng);
        let mut widths = vec![cfg.backbone_channels];
        widths.extend(std::iter::repeat_n(cfg.tdm_channels, TDM_LAYERS));
        let tfpn = TemporalPyramid::new(&widths, cfg.fpn_channels, rng);
        let head = PredictionHead::new(
            cfg.fpn_channels,
            cfg.head_convs,
            cfg.num_classes,
            cfg.anchors_per_position,
            cfg.prior,
            rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            projection,
            srm,
            tdm,
            tfpn,
            head,
        })
    }

    /// Runs from raw pixels `(3, T, H, W)`.
    pub fn forward_pixels(
        &self,
        pixels: &[f32],
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<Trace<T>, NetError> {
        let pooled = pool_pixels(pixels, 3, frames, height, width)?;
        self.forward_pooled(pooled)
    }

    /// Runs from the pooled `(3, T/8, H', W')` map.
    pub fn forward_pooled(&self, pooled: Tensor<T>) -> Result<Trace<T>, NetError> {
        let projected = self.projection.forward(&pooled)?;
        let seq = self.srm.forward(&projected)?;
        let mut trace = self.forward_sequence(seq)?;
        trace.pooled = Some(pooled);
        trace.projected = Some(projected);
        Ok(trace)
    }

    /// Runs from a precomputed `(C_b, T/8)` sequence, bypassing the backbone.
    pub fn forward_sequence(&self, seq: Tensor<T>) -> Result<Trace<T>, NetError> {
        if seq.shape().len() != 2 || seq.dim(0) != self.cfg.backbone_channels {
            return Err(tensor::shape_err(
                "sequence",
                &[self.cfg.backbone_channels, 0],
                seq.shape(),
            ));
        }
        let levels = self.tdm.forward(&seq)?;
        let pyramid = self.tfpn.forward(&levels)?;
        let heads = pyramid
            .outputs
            .iter()
            .map(|p| self.head.forward(p))
            .collect::<Result<_, _>>()?;
        Ok(Trace {
            pooled: None,
            projected: None,
            levels,
            pyramid,
            heads,
        })
    }

    /// Accumulates parameter gradients for the given output gradients.
    pub fn backward(&mut self, trace: &Trace<T>, grads: &HeadOutputs<T>) -> Result<(), NetError> {
        let n = trace.heads.len();
        if grads.cls.len() != n || grads.reg.len() != n {
            return Err(tensor::shape_err("backward", &[n], &[grads.cls.len()]));
        }
        let grad_pyramid = trace
            .heads
            .iter()
            .zip(grads.cls.iter().zip(&grads.reg))
            .map(|(h, (gc, gr))| self.head.backward(h, gc, gr))
            .collect::<Result<Vec<_>, _>>()?;
        let grad_levels = self.tfpn.backward(&trace.levels, &trace.pyramid, &grad_pyramid)?;

        let backbone_trainable = trace.projected.is_some()
            && (self.srm.params().iter().any(|p| !p.frozen) || self.projection.params().iter().any(|p| !p.frozen));
        let grad_seq = self.tdm.backward(&trace.levels, grad_levels, backbone_trainable)?;
        if let (Some(grad_seq), Some(projected), Some(pooled)) =
            (grad_seq, trace.projected.as_ref(), trace.pooled.as_ref())
        {
            let grad_projected = self.srm.backward(projected, &grad_seq)?;
            self.projection.backward(pooled, projected, &grad_projected)?;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.projection.params().into_iter().collect();
        out.extend(self.srm.params());
        out.extend(self.tdm.params());
        out.extend(self.tfpn.params());
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self.projection.params_mut().into_iter().collect();
        out.extend(self.srm.params_mut());
        out.extend(self.tdm.params_mut());
        out.extend(self.tfpn.params_mut());
        out.extend(self.head.params_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .params()
                .into_iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    dims: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
                })
                .collect(),
        }
    }

    /// Loads every parameter by name; names and shapes must match exactly.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<(), NetError> {
        let expected = self.params().len();
        if ck.tensors.len() != expected {
            return Err(NetError::Config(format!(
                "checkpoint holds {} tensors, model has {expected}",
                ck.tensors.len()
            )));
        }
        for p in self.params_mut() {
            let t = ck
                .get(&p.name)
                .ok_or_else(|| NetError::Config(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.dims != p.value.shape() {
                return Err(tensor::shape_err("checkpoint", p.value.shape(), &t.dims));
            }
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&t.data) {
                *dst = T::lit(src as f64);
            }
        }
        Ok(())
    }
}
