//! Detection mAP over tIoU thresholds, pooled over videos.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::geometry::{tiou, Segment};
use crate::io::{AnnotationFile, DetectionFile};
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("video {video}: detection class {class} is outside the {num_classes} annotated classes")]
    UnknownClass {
        video: String,
        class: usize,
        num_classes: usize,
    },
    #[error("detections reference unknown video {0:?}")]
    UnknownVideo(String),
    #[error("video {video}: invalid detection segment [{start}, {end}]")]
    BadSegment { video: String, start: f64, end: f64 },
}

/// A scored detection tagged with the video it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledDetection<T> {
    pub video: usize,
    pub segment: Segment<T>,
    pub score: T,
}

/// Descending score, then video, then start.
fn detection_order<T: Scalar>(a: &PooledDetection<T>, b: &PooledDetection<T>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.video.cmp(&b.video))
        .then(
            a.segment
                .start()
                .partial_cmp(&b.segment.start())
                .unwrap_or(Ordering::Equal),
        )
}

/// True-positive flags in descending score order: each detection takes the
/// unmatched gt of its video with the highest tIoU (earlier gt on ties) when
/// that tIoU reaches `threshold`.
pub fn match_detections<T: Scalar>(
    detections: &[PooledDetection<T>],
    gts: &[Vec<Segment<T>>],
    threshold: T,
) -> Vec<bool> {
    let mut order: Vec<&PooledDetection<T>> = detections.iter().collect();
    order.sort_by(|a, b| detection_order(a, b));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .iter()
        .map(|d| {
            let Some(video_gts) = gts.get(d.video) else {
                return false;
            };
            let mut best: Option<(usize, T)> = None;
            for (j, g) in video_gts.iter().enumerate() {
                if used[d.video][j] {
                    continue;
                }
                let o = tiou(&d.segment, g);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= threshold => {
                    used[d.video][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Area under the precision envelope for TP flags in score order.
pub fn interpolated_ap<T: Scalar>(tp: &[bool], num_gts: usize) -> T {
    if num_gts == 0 {
        return T::zero();
    }
    let n = T::from_usize_lossy(num_gts);
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(T::from_usize_lossy(hits) / T::from_usize_lossy(i + 1));
        recall.push(T::from_usize_lossy(hits) / n);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = T::zero();
    let mut prev = T::zero();
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev {
            ap += (*r - prev) * *p;
            prev = *r;
        }
    }
    ap
}

/// AP of one class pooled over videos; `None` when the class has neither gts nor detections.
pub fn pooled_average_precision<T: Scalar>(
    detections: &[PooledDetection<T>],
    gts: &[Vec<Segment<T>>],
    threshold: T,
) -> Option<T> {
    let num_gts: usize = gts.iter().map(Vec::len).sum();
    if num_gts == 0 && detections.is_empty() {
        return None;
    }
    Some(interpolated_ap(&match_detections(detections, gts, threshold), num_gts))
}

/// AP of one class within a single video.
pub fn average_precision<T: Scalar>(detections: &[(Segment<T>, T)], gts: &[Segment<T>], threshold: T) -> Option<T> {
    let pooled: Vec<_> = detections
        .iter()
        .map(|&(segment, score)| PooledDetection {
            video: 0,
            segment,
            score,
        })
        .collect();
    pooled_average_precision(&pooled, &[gts.to_vec()], threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub num_classes: usize,
    /// `ap[t][k]`; `None` for classes with neither gts nor detections.
    pub ap: Vec<Vec<Option<f64>>>,
    pub map: Vec<f64>,
    pub average_map: f64,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.map[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,threshold,ap\n");
        for k in 0..self.num_classes {
            for (t, thr) in self.thresholds.iter().enumerate() {
                match self.ap[t][k] {
                    Some(ap) => writeln!(out, "{k},{thr:.2},{ap:.6}"),
                    None => writeln!(out, "{k},{thr:.2},"),
                }
                .unwrap();
            }
        }
        for (thr, m) in self.thresholds.iter().zip(&self.map) {
            writeln!(out, "mAP,{thr:.2},{m:.6}").unwrap();
        }
        writeln!(out, "average mAP,all,{:.6}", self.average_map).unwrap();
        out
    }
}

/// Per-class AP, mAP per threshold and the mean over thresholds. Classes with
/// neither gts nor detections are left out of the class mean.
pub fn evaluate(
    detections: &DetectionFile,
    annotations: &AnnotationFile,
    thresholds: &[f64],
) -> Result<EvalReport, EvalError> {
    let k = annotations.num_classes;
    let index: std::collections::HashMap<&str, usize> = annotations
        .videos
        .iter()
        .enumerate()
        .map(|(i, v)| (v.id.as_str(), i))
        .collect();
    let mut per_class: Vec<Vec<PooledDetection<f64>>> = vec![Vec::new(); k];
    for (id, dets) in &detections.videos {
        let &video = index
            .get(id.as_str())
            .ok_or_else(|| EvalError::UnknownVideo(id.clone()))?;
        for d in dets {
            if d.class_id >= k {
                return Err(EvalError::UnknownClass {
                    video: id.clone(),
                    class: d.class_id,
                    num_classes: k,
                });
            }
            let segment = d.segment().map_err(|_| EvalError::BadSegment {
                video: id.clone(),
                start: d.start_frame,
                end: d.end_frame,
            })?;
            per_class[d.class_id].push(PooledDetection {
                video,
                segment,
                score: d.score,
            });
        }
    }
    let mut gts: Vec<Vec<Vec<Segment<f64>>>> = vec![vec![Vec::new(); annotations.videos.len()]; k];
    for (vi, v) in annotations.videos.iter().enumerate() {
        for (seg, class) in v.gts() {
            gts[class][vi].push(seg);
        }
    }
    let mut ap = Vec::with_capacity(thresholds.len());
    let mut map = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let row: Vec<Option<f64>> = (0..k)
            .map(|c| pooled_average_precision(&per_class[c], &gts[c], thr))
            .collect();
        let present: Vec<f64> = row.iter().flatten().copied().collect();
        map.push(if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        });
        ap.push(row);
    }
    let average_map = if map.is_empty() {
        0.0
    } else {
        map.iter().sum::<f64>() / map.len() as f64
    };
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        num_classes: k,
        ap,
        map,
        average_map,
    })
}
