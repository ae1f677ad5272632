//! One-stage anchor-based temporal action detection.
//!
//! A compact 3D backbone (or precomputed clip features) is reduced to a 1D
//! sequence, downsampled into a temporal pyramid, fused top-down and scored
//! by a shared head against multi-scale anchors. Everything numeric is
//! generic over [`Scalar`]; the aliases below fix it to `f32` or `f64`.

pub mod anchors;
pub mod augment;
pub mod config;
pub mod data;
pub mod evaluator;
pub mod geometry;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod losses;
pub mod net;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use anchors::{AnchorConfig, AnchorSet};
pub use config::RunConfig;
pub use geometry::{ScoredSegment, Segment, SuppressMode};
pub use net::{Detector, NetConfig, Tensor};
pub use scalar::Scalar;

pub type SegmentF32 = Segment<f32>;
pub type SegmentF64 = Segment<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type DetectorF32 = Detector<f32>;
pub type DetectorF64 = Detector<f64>;
pub type AnchorSetF32 = AnchorSet<f32>;
pub type AnchorSetF64 = AnchorSet<f64>;
