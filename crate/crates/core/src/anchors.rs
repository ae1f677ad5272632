//! Pyramid anchors: generation, tIoU-band assignment, offset decoding and the
//! per-ground-truth positive count distribution.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{tiou, GeometryError, Segment};
use crate::io::annotations::VideoAnnotation;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("invalid anchor configuration: {0}")]
    Config(String),
    #[error("clip length {clip_len} is not divisible by the largest stride {stride}")]
    ClipLength { clip_len: usize, stride: usize },
    #[error("non-finite regression offsets ({dc}, {dl})")]
    NonFiniteOffsets { dc: f64, dl: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub strides: Vec<usize>,
    pub base_sizes: Vec<f64>,
    pub scales: Vec<f64>,
    pub pos_thr: f64,
    pub neg_thr: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            strides: vec![8, 16, 32, 64, 128],
            base_sizes: vec![16.0, 32.0, 64.0, 128.0, 256.0],
            scales: (0..5).map(|i| 2f64.powf(i as f64 / 5.0)).collect(),
            pos_thr: 0.6,
            neg_thr: 0.4,
        }
    }
}

impl AnchorConfig {
    /// The three-scale `{2^0, 2^(1/3), 2^(2/3)}` layout common in image detectors.
    pub fn three_scales() -> Self {
        Self {
            scales: (0..3).map(|i| 2f64.powf(i as f64 / 3.0)).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AnchorError> {
        let bad = |msg: String| Err(AnchorError::Config(msg));
        if self.strides.is_empty() {
            return bad("no pyramid levels".into());
        }
        if self.strides.len() != self.base_sizes.len() {
            return bad(format!(
                "{} strides but {} base sizes",
                self.strides.len(),
                self.base_sizes.len()
            ));
        }
        if self.strides[0] == 0 || self.strides.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!(
                "strides must be positive and strictly increasing: {:?}",
                self.strides
            ));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("scales must be positive: {:?}", self.scales));
        }
        if self.base_sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("base sizes must be positive: {:?}", self.base_sizes));
        }
        if !(0.0 <= self.neg_thr && self.neg_thr < self.pos_thr && self.pos_thr <= 1.0) {
            return bad(format!(
                "need 0 <= neg_thr < pos_thr <= 1, got {} / {}",
                self.neg_thr, self.pos_thr
            ));
        }
        Ok(())
    }

    pub fn max_stride(&self) -> usize {
        *self.strides.last().unwrap_or(&1)
    }

    pub fn anchors_per_position(&self) -> usize {
        self.scales.len()
    }
}

/// Anchors for one clip length. Within a level anchors are ordered
/// position-major: index `position * scales + scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet<T = f64> {
    levels: Vec<Vec<Segment<T>>>,
    level_offsets: Vec<usize>,
    positions: Vec<usize>,
    scales: usize,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> &[Segment<T>] {
        &self.levels[level]
    }

    /// Temporal positions per level.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    /// Flat index of the first anchor of every level.
    pub fn level_offsets(&self) -> &[usize] {
        &self.level_offsets
    }

    pub fn get(&self, flat: usize) -> Segment<T> {
        let (level, local) = self.locate(flat);
        self.levels[level][local]
    }

    /// Maps a flat index to `(level, index within level)`.
    pub fn locate(&self, flat: usize) -> (usize, usize) {
        let level = self.level_offsets.partition_point(|&o| o <= flat) - 1;
        (level, flat - self.level_offsets[level])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Segment<T>> {
        self.levels.iter().flatten()
    }
}

pub fn generate_anchors<T: Scalar>(cfg: &AnchorConfig, clip_len: usize) -> Result<AnchorSet<T>, AnchorError> {
    cfg.validate()?;
    let stride_max = cfg.max_stride();
    if clip_len == 0 || clip_len % stride_max != 0 {
        return Err(AnchorError::ClipLength {
            clip_len,
            stride: stride_max,
        });
    }
    let mut levels = Vec::with_capacity(cfg.strides.len());
    let mut level_offsets = Vec::with_capacity(cfg.strides.len());
    let mut positions = Vec::with_capacity(cfg.strides.len());
    let mut offset = 0;
    for (&stride, &base) in cfg.strides.iter().zip(&cfg.base_sizes) {
        let count = clip_len / stride;
        let mut level = Vec::with_capacity(count * cfg.scales.len());
        for i in 0..count {
            let center = T::lit((i as f64 + 0.5) * stride as f64);
            for &scale in &cfg.scales {
                level.push(Segment::from_center(center, T::lit(base * scale))?);
            }
        }
        level_offsets.push(offset);
        positions.push(count);
        offset += level.len();
        levels.push(level);
    }
    Ok(AnchorSet {
        levels,
        level_offsets,
        positions,
        scales: cfg.scales.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<AnchorLabel>,
    pub positives_per_gt: Vec<usize>,
}

impl Assignment {
    pub fn count_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }

    pub fn count_negative(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Negative).count()
    }

    pub fn count_ignored(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Ignored).count()
    }
}

/// Labels every anchor by its best tIoU over the ground truths: positive
/// (to the argmax, lowest index on ties) at `>= pos_thr`, negative below
/// `neg_thr`, ignored in between. No forced matching.
pub fn assign<T: Scalar>(anchors: &AnchorSet<T>, gts: &[(Segment<T>, usize)], cfg: &AnchorConfig) -> Assignment {
    let pos = T::lit(cfg.pos_thr);
    let neg = T::lit(cfg.neg_thr);
    let mut positives_per_gt = vec![0; gts.len()];
    let labels = anchors
        .iter()
        .map(|anchor| {
            let best = gts.iter().enumerate().map(|(i, (gt, _))| (i, tiou(anchor, gt))).fold(
                None,
                |acc: Option<(usize, T)>, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                },
            );
            match best {
                Some((i, v)) if v >= pos => {
                    positives_per_gt[i] += 1;
                    AnchorLabel::Positive(i)
                }
                Some((_, v)) if v >= neg => AnchorLabel::Ignored,
                _ => AnchorLabel::Negative,
            }
        })
        .collect();
    Assignment {
        labels,
        positives_per_gt,
    }
}

/// Bound on `|dl|` applied by [`decode`].
pub const LOG_SCALE_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Applies `(dc, dl)`: the centre moves by `dc * length`, the length scales by `exp(dl)`,
/// with `dl` clamped to `±LOG_SCALE_CLAMP`.
pub fn decode<T: Scalar>(anchor: &Segment<T>, dc: T, dl: T) -> Result<Segment<T>, AnchorError> {
    if !dc.is_finite() || !dl.is_finite() {
        return Err(AnchorError::NonFiniteOffsets {
            dc: dc.as_f64(),
            dl: dl.as_f64(),
        });
    }
    let dl = dl.max(-T::lit(LOG_SCALE_CLAMP)).min(T::lit(LOG_SCALE_CLAMP));
    // written as edge updates so zero offsets reproduce the anchor exactly
    let length = anchor.length();
    let shift = dc * length;
    let shrink = (length - length * dl.exp()) / T::lit(2.0);
    Ok(Segment::new(
        anchor.start() + shift + shrink,
        anchor.end() + shift - shrink,
    )?)
}

/// Inverse of [`decode`].
pub fn encode<T: Scalar>(anchor: &Segment<T>, target: &Segment<T>) -> (T, T) {
    let length = anchor.length();
    (
        (target.center() - anchor.center()) / length,
        (target.length() / length).ln(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScaleBucket {
    Small,
    Medium,
    Large,
}

impl ScaleBucket {
    /// small: (0, 2.5s], medium: (2.5s, 6s], large: beyond 6s.
    pub fn of_seconds(duration: f64) -> Self {
        if duration <= 2.5 {
            Self::Small
        } else if duration <= 6.0 {
            Self::Medium
        } else {
            Self::Large
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Small => "small",
            Self::Medium => "medium",
            Self::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramRow {
    pub bucket: ScaleBucket,
    pub positives_per_gt: usize,
    pub pdf: f64,
    pub cdf: f64,
}

/// Distribution of positive anchors per ground truth, split by duration bucket.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignmentHistogram {
    counts: BTreeMap<ScaleBucket, Vec<usize>>,
}

impl AssignmentHistogram {
    pub fn is_empty(&self) -> bool {
        self.counts.values().all(Vec::is_empty)
    }

    /// Raw positive counts of every ground truth in the bucket.
    pub fn counts(&self, bucket: ScaleBucket) -> &[usize] {
        self.counts.get(&bucket).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn mean(&self, bucket: ScaleBucket) -> Option<f64> {
        let c = self.counts(bucket);
        (!c.is_empty()).then(|| c.iter().sum::<usize>() as f64 / c.len() as f64)
    }

    pub fn mean_all(&self) -> Option<f64> {
        let all: Vec<usize> = self.counts.values().flatten().copied().collect();
        (!all.is_empty()).then(|| all.iter().sum::<usize>() as f64 / all.len() as f64)
    }

    pub fn rows(&self) -> Vec<HistogramRow> {
        let mut rows = Vec::new();
        for (&bucket, counts) in &self.counts {
            if counts.is_empty() {
                continue;
            }
            let max = *counts.iter().max().unwrap();
            let n = counts.len() as f64;
            let mut cum = 0usize;
            for value in 0..=max {
                let here = counts.iter().filter(|&&c| c == value).count();
                cum += here;
                rows.push(HistogramRow {
                    bucket,
                    positives_per_gt: value,
                    pdf: here as f64 / n,
                    cdf: cum as f64 / n,
                });
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale_bucket,positives_per_gt,pdf,cdf\n");
        for r in self.rows() {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6}",
                r.bucket.name(),
                r.positives_per_gt,
                r.pdf,
                r.cdf
            );
        }
        out
    }
}

/// Assigns anchors laid over each whole video (length rounded up to the
/// largest stride) and records how many positives every ground truth gets.
pub fn assignment_histogram(
    videos: &[VideoAnnotation],
    cfg: &AnchorConfig,
) -> Result<AssignmentHistogram, AnchorError> {
    cfg.validate()?;
    let mut hist = AssignmentHistogram::default();
    let stride = cfg.max_stride();
    for video in videos {
        if video.instances.is_empty() {
            continue;
        }
        let padded = video.num_frames.max(1).div_ceil(stride) * stride;
        let anchors = generate_anchors::<f64>(cfg, padded)?;
        let gts: Vec<(Segment<f64>, usize)> = video
            .instances
            .iter()
            .map(|inst| Ok((inst.segment()?, inst.class_id)))
            .collect::<Result<_, GeometryError>>()?;
        let result = assign(&anchors, &gts, cfg);
        for ((gt, _), count) in gts.iter().zip(result.positives_per_gt) {
            let bucket = ScaleBucket::of_seconds(gt.length() / video.fps);
            hist.counts.entry(bucket).or_default().push(count);
        }
    }
    Ok(hist)
}
