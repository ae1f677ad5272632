//! Sliding-window detection over untrimmed videos.

use serde::{Deserialize, Serialize};

use crate::anchors::{decode, generate_anchors, AnchorConfig, AnchorError, AnchorSet};
use crate::augment::{center_crop, AugmentError, ClipData, FrameSource, TemporalSource, FEATURE_STRIDE};
use crate::geometry::{score_order, suppress, ScoredSegment, Segment, SuppressMode};
use crate::io::{Detection, VideoFrames};
use crate::losses::sigmoid;
use crate::net::{Detector, HeadOutputs, NetError, Tensor, Trace};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum InferError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("invalid inference config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub window: usize,
    pub overlap_ratio: f64,
    pub score_threshold: f64,
    pub suppress_threshold: f64,
    pub suppress_mode: SuppressMode,
    pub max_detections_per_video: usize,
    /// Centre crop applied to pixel input.
    pub crop_size: (usize, usize),
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            window: 768,
            overlap_ratio: 0.25,
            score_threshold: 0.005,
            suppress_threshold: 0.5,
            suppress_mode: SuppressMode::Nmw,
            max_detections_per_video: 200,
            crop_size: (112, 112),
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<(), InferError> {
        let err = |m: String| Err(InferError::Config(m));
        if self.window == 0 || self.window % FEATURE_STRIDE != 0 {
            return err(format!(
                "window {} must be a positive multiple of {FEATURE_STRIDE}",
                self.window
            ));
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return err(format!("overlap_ratio {} must lie in [0, 1)", self.overlap_ratio));
        }
        for (name, t) in [
            ("score_threshold", self.score_threshold),
            ("suppress_threshold", self.suppress_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return err(format!("{name} {t} must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Distance between window starts, rounded down to whole feature positions.
    pub fn window_stride(&self) -> usize {
        let raw = (self.window as f64 * (1.0 - self.overlap_ratio)).floor() as usize;
        (raw / FEATURE_STRIDE * FEATURE_STRIDE).max(FEATURE_STRIDE)
    }
}

/// Window starts covering `[0, video_len)`; the last window is end-aligned.
pub fn plan_windows(video_len: usize, cfg: &InferConfig) -> Vec<usize> {
    if video_len <= cfg.window {
        return vec![0];
    }
    let stride = cfg.window_stride();
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|s| s + cfg.window <= video_len)
        .collect();
    let last = *starts.last().expect("first window fits");
    if last + cfg.window < video_len {
        starts.push(video_len - cfg.window);
    }
    starts
}

/// Runs the detector on one clip.
pub fn forward_clip<T: Scalar>(model: &Detector<T>, clip: &ClipData) -> Result<Trace<T>, NetError> {
    match clip {
        ClipData::Features(f) => model.forward_sequence(f.cast()),
        ClipData::Pixels(c) => model.forward_pixels(&c.pixels, c.frames, c.height, c.width),
    }
}

/// Candidates from one window's head outputs, in video frames and clipped to `[0, video_len]`.
pub fn window_candidates<T: Scalar>(
    out: &HeadOutputs<T>,
    anchors: &AnchorSet<T>,
    num_classes: usize,
    offset: usize,
    video_len: usize,
    score_threshold: f64,
) -> Result<Vec<ScoredSegment<f64>>, InferError> {
    let a = anchors.scales();
    let mut cands = Vec::new();
    for level in 0..anchors.num_levels() {
        let (cls, reg) = (&out.cls[level], &out.reg[level]);
        for (local, anchor) in anchors.level(level).iter().enumerate() {
            let (pos, scale) = (local / a, local % a);
            let mut decoded: Option<Option<Segment<f64>>> = None;
            for k in 0..num_classes {
                let score = sigmoid(cls.row(scale * num_classes + k)[pos]).as_f64();
                if score < score_threshold {
                    continue;
                }
                let seg = match decoded {
                    Some(s) => s,
                    None => {
                        let s = decode(anchor, reg.row(2 * scale)[pos], reg.row(2 * scale + 1)[pos])?
                            .cast::<f64>()
                            .shift(offset as f64)
                            .clip(0.0, video_len as f64);
                        decoded = Some(s);
                        s
                    }
                };
                if let Some(segment) = seg {
                    cands.push(ScoredSegment {
                        segment,
                        score: score.min(1.0),
                        class_id: k,
                    });
                }
            }
        }
    }
    Ok(cands)
}

/// Per-class suppression over pooled candidates, merged, sorted and truncated.
pub fn postprocess(cands: Vec<ScoredSegment<f64>>, num_classes: usize, cfg: &InferConfig) -> Vec<Detection> {
    let mut by_class: Vec<Vec<ScoredSegment<f64>>> = vec![Vec::new(); num_classes];
    for c in cands {
        by_class[c.class_id].push(c);
    }
    let mut kept: Vec<ScoredSegment<f64>> = by_class
        .iter()
        .flat_map(|c| suppress(c, cfg.suppress_threshold, cfg.suppress_mode))
        .collect();
    kept.sort_by(score_order);
    kept.truncate(cfg.max_detections_per_video);
    kept.into_iter().map(Detection::from).collect()
}

/// Input for [`detect_video`].
pub enum VideoInput<'a> {
    Features(&'a Tensor<f32>),
    Frames { frames: &'a VideoFrames, fps: f64 },
}

impl VideoInput<'_> {
    fn num_frames(&self) -> usize {
        match self {
            VideoInput::Features(f) => f.num_frames(),
            VideoInput::Frames { frames, .. } => frames.frames,
        }
    }

    fn window(&self, start: usize, len: usize, crop: (usize, usize)) -> Result<ClipData, InferError> {
        Ok(match self {
            VideoInput::Features(f) => f.window(start, len),
            VideoInput::Frames { frames, fps } => {
                let ClipData::Pixels(c) = (FrameSource { frames, fps: *fps }).window(start, len) else {
                    unreachable!("frame sources yield pixels")
                };
                ClipData::Pixels(center_crop(&c, crop)?)
            }
        })
    }
}

/// Detections for one video, in absolute frames.
pub fn detect_video<T: Scalar>(
    model: &Detector<T>,
    video: &VideoInput<'_>,
    anchor_cfg: &AnchorConfig,
    cfg: &InferConfig,
) -> Result<Vec<Detection>, InferError> {
    cfg.validate()?;
    let anchors = generate_anchors::<T>(anchor_cfg, cfg.window)?;
    let len = video.num_frames();
    let k = model.cfg.num_classes;
    let mut cands = Vec::new();
    for start in plan_windows(len, cfg) {
        let clip = video.window(start, cfg.window, cfg.crop_size)?;
        let trace = forward_clip(model, &clip)?;
        cands.extend(window_candidates(
            &trace.outputs(),
            &anchors,
            k,
            start,
            len,
            cfg.score_threshold,
        )?);
    }
    Ok(postprocess(cands, k, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_plans() {
        let cfg = InferConfig::default();
        assert_eq!(plan_windows(768, &cfg), vec![0]);
        assert_eq!(plan_windows(1536, &cfg), vec![0, 576, 768]);
        assert_eq!(plan_windows(500, &cfg), vec![0]);
        assert_eq!(plan_windows(1344, &cfg), vec![0, 576]);
    }

    #[test]
    fn windows_cover_every_frame() {
        let cfg = InferConfig::default();
        for len in (8..5000).step_by(8) {
            let starts = plan_windows(len, &cfg);
            let mut covered = 0;
            for s in &starts {
                assert!(*s <= covered, "gap before {s} for len {len}");
                covered = covered.max(s + cfg.window);
            }
            assert!(covered >= len);
            assert!(starts.iter().all(|s| s % 8 == 0));
        }
    }

    fn small_net() -> NetConfig {
        NetConfig {
            backbone_channels: 8,
            tdm_channels: 8,
            fpn_channels: 8,
            head_convs: 1,
            num_classes: 2,
            ..Default::default()
        }
    }

    #[test]
    fn untrained_model_output_is_valid() {
        let model = Detector::<f32>::new(&small_net(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let feats = Tensor::full(&[8, 170], 0.5f32);
        let cfg = InferConfig::default();
        let dets = detect_video(&model, &VideoInput::Features(&feats), &AnchorConfig::default(), &cfg).unwrap();
        assert!(!dets.is_empty() && dets.len() <= 200);
        for w in dets.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for d in &dets {
            assert!(d.start_frame >= 0.0 && d.end_frame <= 1360.0);
            assert!(d.score >= 0.005);
        }
    }

    #[test]
    fn overlap_duplicates_collapse() {
        // the same detection seen from two windows, slightly perturbed
        let cfg = InferConfig::default();
        let seg = |a, b| Segment::new(a, b).unwrap();
        let cands = vec![
            ScoredSegment {
                segment: seg(600.0, 700.0),
                score: 0.9,
                class_id: 1,
            },
            ScoredSegment {
                segment: seg(602.0, 698.0),
                score: 0.85,
                class_id: 1,
            },
            ScoredSegment {
                segment: seg(600.0, 700.0),
                score: 0.3,
                class_id: 0,
            },
        ];
        let dets = postprocess(cands, 2, &cfg);
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].class_id, 1);
        assert_eq!(dets[0].score, 0.9);
    }

    #[test]
    fn candidates_are_clipped_to_the_video() {
        let anchors = generate_anchors::<f64>(&AnchorConfig::default(), 128).unwrap();
        let mut out = crate::losses::empty_outputs(&anchors, 1);
        for t in &mut out.cls {
            t.fill(5.0);
        }
        let c = window_candidates(&out, &anchors, 1, 0, 100, 0.005).unwrap();
        assert!(!c.is_empty());
        assert!(c.iter().all(|s| s.segment.start() >= 0.0 && s.segment.end() <= 100.0));
        assert!(c.iter().any(|s| s.segment.end() == 100.0));
    }
}
