//! Segment arithmetic: temporal IoU, the temporal distance-IoU loss and
//! greedy suppression (NMS / NMW).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("segment endpoints must be finite, got [{start}, {end}]")]
    NonFinite { start: f64, end: f64 },
    #[error("segment end must exceed start, got [{start}, {end}]")]
    Empty { start: f64, end: f64 },
}

/// Half-open temporal interval `[start, end)` in frame units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment<T = f64> {
    start: T,
    end: T,
}

impl<T: Scalar> Segment<T> {
    pub fn new(start: T, end: T) -> Result<Self, GeometryError> {
        if !start.is_finite() || !end.is_finite() {
            return Err(GeometryError::NonFinite {
                start: start.as_f64(),
                end: end.as_f64(),
            });
        }
        if end <= start {
            return Err(GeometryError::Empty {
                start: start.as_f64(),
                end: end.as_f64(),
            });
        }
        Ok(Self { start, end })
    }

    /// Segment of the given length centred on `center`.
    pub fn from_center(center: T, length: T) -> Result<Self, GeometryError> {
        let half = length / T::lit(2.0);
        Self::new(center - half, center + half)
    }

    #[inline]
    pub fn start(&self) -> T {
        self.start
    }

    #[inline]
    pub fn end(&self) -> T {
        self.end
    }

    #[inline]
    pub fn length(&self) -> T {
        self.end - self.start
    }

    #[inline]
    pub fn center(&self) -> T {
        (self.start + self.end) / T::lit(2.0)
    }

    pub fn shift(&self, offset: T) -> Self {
        Self {
            start: self.start + offset,
            end: self.end + offset,
        }
    }

    /// Intersection with `[lo, hi]`, `None` when nothing of positive length remains.
    pub fn clip(&self, lo: T, hi: T) -> Option<Self> {
        let start = self.start.max(lo);
        let end = self.end.min(hi);
        (end > start).then_some(Self { start, end })
    }

    pub fn intersection_length(&self, other: &Self) -> T {
        (self.end.min(other.end) - self.start.max(other.start)).max(T::zero())
    }

    pub fn cast<U: Scalar>(&self) -> Segment<U> {
        Segment {
            start: U::lit(self.start.as_f64()),
            end: U::lit(self.end.as_f64()),
        }
    }
}

/// Temporal intersection over union.
pub fn tiou<T: Scalar>(a: &Segment<T>, b: &Segment<T>) -> T {
    let inter = a.intersection_length(b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.length() + b.length() - inter;
    (inter / union).min(T::one())
}

/// Loss value plus its partial derivatives with respect to the predicted endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiouLoss<T> {
    pub loss: T,
    pub grad_start: T,
    pub grad_end: T,
}

/// `1 - tIoU + rho^2 / u^2`, where `rho` is the distance between the two
/// centres and `u` the length of the smallest segment enclosing both.
///
/// At kinks (shared endpoints) the gradient takes the branch where the
/// prediction wins the max/min: `max(ps, gs)` picks `ps` when `ps >= gs`,
/// `min(pe, ge)` picks `pe` when `pe <= ge`.
pub fn diou_loss<T: Scalar>(pred: &Segment<T>, gt: &Segment<T>) -> DiouLoss<T> {
    let two = T::lit(2.0);
    let (ps, pe) = (pred.start, pred.end);
    let (gs, ge) = (gt.start, gt.end);

    let pred_wins_start = ps >= gs;
    let pred_wins_end = pe <= ge;
    let inner_start = if pred_wins_start { ps } else { gs };
    let inner_end = if pred_wins_end { pe } else { ge };
    let raw_inter = inner_end - inner_start;
    let overlapping = raw_inter > T::zero();
    let inter = if overlapping { raw_inter } else { T::zero() };

    // d(inter)/d(ps), d(inter)/d(pe)
    let (di_s, di_e) = if overlapping {
        (
            if pred_wins_start { -T::one() } else { T::zero() },
            if pred_wins_end { T::one() } else { T::zero() },
        )
    } else {
        (T::zero(), T::zero())
    };

    let union = pred.length() + gt.length() - inter;
    let iou = inter / union;
    // d(union) = d(len_pred) - d(inter); d(len_pred)/d(ps) = -1, /d(pe) = +1
    let du_s = -T::one() - di_s;
    let du_e = T::one() - di_e;
    let diou_s = (di_s * union - inter * du_s) / (union * union);
    let diou_e = (di_e * union - inter * du_e) / (union * union);

    let pred_outer_start = ps <= gs;
    let pred_outer_end = pe >= ge;
    let outer_start = if pred_outer_start { ps } else { gs };
    let outer_end = if pred_outer_end { pe } else { ge };
    let enclosing = outer_end - outer_start;
    let denc_s = if pred_outer_start { -T::one() } else { T::zero() };
    let denc_e = if pred_outer_end { T::one() } else { T::zero() };

    let rho = (ps + pe) / two - (gs + ge) / two;
    let enc2 = enclosing * enclosing;
    let penalty = rho * rho / enc2;
    let half = T::lit(0.5);
    // d(rho^2/u^2) = 2 rho d(rho) / u^2 - 2 rho^2 d(u) / u^3
    let dpen_s = two * rho * half / enc2 - two * rho * rho * denc_s / (enc2 * enclosing);
    let dpen_e = two * rho * half / enc2 - two * rho * rho * denc_e / (enc2 * enclosing);

    DiouLoss {
        loss: T::one() - iou + penalty,
        grad_start: -diou_s + dpen_s,
        grad_end: -diou_e + dpen_e,
    }
}

/// A segment carrying a class id and a confidence score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSegment<T = f64> {
    pub segment: Segment<T>,
    pub score: T,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuppressMode {
    Nms,
    #[default]
    Nmw,
}

/// Descending score, then lower start, then lower class id.
pub fn score_order<T: Scalar>(a: &ScoredSegment<T>, b: &ScoredSegment<T>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.segment.start.partial_cmp(&b.segment.start).unwrap_or(Ordering::Equal))
        .then_with(|| a.class_id.cmp(&b.class_id))
}

/// Greedy suppression over candidates of a single class.
///
/// The highest scoring remaining candidate seeds a cluster made of every
/// remaining candidate with `tiou(seed, c) >= threshold`. NMS keeps the seed.
/// NMW replaces the cluster by the mean of its boundaries weighted by
/// `score * tiou(seed, c)` and keeps the seed score.
pub fn suppress<T: Scalar>(candidates: &[ScoredSegment<T>], threshold: T, mode: SuppressMode) -> Vec<ScoredSegment<T>> {
    let mut remaining: Vec<ScoredSegment<T>> = candidates.to_vec();
    remaining.sort_by(score_order);

    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let seed = remaining[0];
        let mut cluster = Vec::new();
        let mut rest = Vec::with_capacity(remaining.len());
        for (i, cand) in remaining.into_iter().enumerate() {
            let overlap = if i == 0 {
                T::one()
            } else {
                tiou(&seed.segment, &cand.segment)
            };
            if i == 0 || overlap >= threshold {
                cluster.push((cand, overlap));
            } else {
                rest.push(cand);
            }
        }
        remaining = rest;

        let merged = match mode {
            SuppressMode::Nms => seed,
            SuppressMode::Nmw => weighted_merge(&seed, &cluster),
        };
        kept.push(merged);
    }
    kept.sort_by(score_order);
    kept
}

fn weighted_merge<T: Scalar>(seed: &ScoredSegment<T>, cluster: &[(ScoredSegment<T>, T)]) -> ScoredSegment<T> {
    let mut total = T::zero();
    let mut start = T::zero();
    let mut end = T::zero();
    for (cand, overlap) in cluster {
        let w = cand.score * *overlap;
        total += w;
        start += w * cand.segment.start;
        end += w * cand.segment.end;
    }
    if total <= T::zero() {
        return *seed;
    }
    match Segment::new(start / total, end / total) {
        Ok(segment) => ScoredSegment { segment, ..*seed },
        Err(_) => *seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(a: f64, b: f64) -> Segment<f64> {
        Segment::new(a, b).unwrap()
    }

    fn scored(a: f64, b: f64, score: f64) -> ScoredSegment<f64> {
        ScoredSegment {
            segment: seg(a, b),
            score,
            class_id: 0,
        }
    }

    /// Independent evaluation of the loss from its definition, no branch bookkeeping.
    fn diou_reference(ps: f64, pe: f64, gs: f64, ge: f64) -> f64 {
        let inter = (pe.min(ge) - ps.max(gs)).max(0.0);
        let union = (pe - ps) + (ge - gs) - inter;
        let u = pe.max(ge) - ps.min(gs);
        let rho = (ps + pe) / 2.0 - (gs + ge) / 2.0;
        1.0 - inter / union + rho * rho / (u * u)
    }

    #[test]
    fn rejects_invalid_segments() {
        assert!(matches!(Segment::new(3.0, 3.0), Err(GeometryError::Empty { .. })));
        assert!(matches!(
            Segment::new(f64::NAN, 3.0),
            Err(GeometryError::NonFinite { .. })
        ));
        assert!(Segment::new(4.0, 1.0).is_err());
    }

    #[test]
    fn tiou_examples() {
        assert_eq!(tiou(&seg(1.0, 3.0), &seg(1.0, 3.0)), 1.0);
        assert_eq!(tiou(&seg(0.0, 1.0), &seg(2.0, 3.0)), 0.0);
        assert!((tiou(&seg(0.0, 4.0), &seg(2.0, 6.0)) - 1.0 / 3.0).abs() < 1e-12);
        // touching endpoints
        assert_eq!(tiou(&seg(0.0, 1.0), &seg(1.0, 3.0)), 0.0);
    }

    #[test]
    fn diou_examples() {
        assert_eq!(diou_loss(&seg(1.0, 3.0), &seg(1.0, 3.0)).loss, 0.0);
        let far = diou_loss(&seg(0.0, 2.0), &seg(4.0, 6.0)).loss;
        assert!((far - (1.0 + 16.0 / 36.0)).abs() < 1e-12);
        let partial = diou_loss(&seg(0.0, 4.0), &seg(2.0, 6.0)).loss;
        assert!((partial - (1.0 - 1.0 / 3.0 + 4.0 / 36.0)).abs() < 1e-12);
    }

    #[test]
    fn diou_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 1000 {
            let ps: f64 = rng.random_range(-10.0..10.0);
            let pe = ps + rng.random_range(0.5..10.0);
            let gs: f64 = rng.random_range(-10.0..10.0);
            let ge = gs + rng.random_range(0.5..10.0);
            if [(ps - gs).abs(), (pe - ge).abs(), (pe - gs).abs(), (ps - ge).abs()]
                .iter()
                .any(|d| *d < 1e-3)
            {
                continue;
            }
            let out = diou_loss(&seg(ps, pe), &seg(gs, ge));
            let ns = (diou_reference(ps + h, pe, gs, ge) - diou_reference(ps - h, pe, gs, ge)) / (2.0 * h);
            let ne = (diou_reference(ps, pe + h, gs, ge) - diou_reference(ps, pe - h, gs, ge)) / (2.0 * h);
            let diff = ((out.grad_start - ns).powi(2) + (out.grad_end - ne).powi(2)).sqrt();
            let scale = (out.grad_start.hypot(out.grad_end)).max(ns.hypot(ne)).max(1e-12);
            assert!(diff / scale <= 1e-6, "pair {ps} {pe} {gs} {ge}: {diff}");
            checked += 1;
        }
    }

    #[test]
    fn diou_f32_agrees_with_f64() {
        let a = diou_loss(&seg(0.0, 4.0), &seg(2.0, 6.0));
        let b = diou_loss(
            &Segment::<f32>::new(0.0, 4.0).unwrap(),
            &Segment::<f32>::new(2.0, 6.0).unwrap(),
        );
        assert!((a.loss - b.loss as f64).abs() < 1e-6);
        assert!((a.grad_end - b.grad_end as f64).abs() < 1e-6);
    }

    #[test]
    fn suppress_examples() {
        assert!(suppress::<f64>(&[], 0.5, SuppressMode::Nmw).is_empty());

        let single = [scored(2.0, 5.0, 0.3)];
        assert_eq!(suppress(&single, 0.5, SuppressMode::Nms), single.to_vec());
        assert_eq!(suppress(&single, 0.5, SuppressMode::Nmw), single.to_vec());

        let dup = [scored(0.0, 10.0, 0.9), scored(0.0, 10.0, 0.8)];
        let out = suppress(&dup, 0.5, SuppressMode::Nmw);
        assert_eq!(out.len(), 1);
        assert!((out[0].segment.start() - 0.0).abs() < 1e-12);
        assert!((out[0].segment.end() - 10.0).abs() < 1e-12);
        assert_eq!(out[0].score, 0.9);

        let apart = [scored(0.0, 10.0, 0.9), scored(100.0, 110.0, 0.8)];
        assert_eq!(suppress(&apart, 0.5, SuppressMode::Nmw).len(), 2);
        assert_eq!(suppress(&apart, 0.5, SuppressMode::Nms).len(), 2);
    }

    #[test]
    fn nmw_weights_by_score_and_overlap() {
        // seed [0,10] s=1.0 (w=1), member [2,12] s=0.5, tiou=8/12 -> w=1/3
        let out = suppress(
            &[scored(0.0, 10.0, 1.0), scored(2.0, 12.0, 0.5)],
            0.5,
            SuppressMode::Nmw,
        );
        assert_eq!(out.len(), 1);
        let w = 0.5 * 8.0 / 12.0;
        let start = (0.0 + w * 2.0) / (1.0 + w);
        let end = (10.0 + w * 12.0) / (1.0 + w);
        assert!((out[0].segment.start() - start).abs() < 1e-12);
        assert!((out[0].segment.end() - end).abs() < 1e-12);
    }

    #[test]
    fn ties_break_on_start_then_class() {
        let mut a = scored(5.0, 6.0, 0.5);
        let b = scored(1.0, 2.0, 0.5);
        a.class_id = 0;
        let out = suppress(&[a, b], 0.5, SuppressMode::Nms);
        assert_eq!(out[0], b);
    }

    fn arb_segment() -> impl Strategy<Value = Segment<f64>> {
        (-100.0f64..100.0, 0.01f64..50.0).prop_map(|(s, l)| seg(s, s + l))
    }

    fn arb_candidates() -> impl Strategy<Value = Vec<ScoredSegment<f64>>> {
        prop::collection::vec(
            (arb_segment(), 0.0f64..=1.0).prop_map(|(segment, score)| ScoredSegment {
                segment,
                score,
                class_id: 0,
            }),
            0..25,
        )
    }

    proptest! {
        #[test]
        fn tiou_symmetric_and_bounded(a in arb_segment(), b in arb_segment()) {
            let ab = tiou(&a, &b);
            prop_assert_eq!(ab, tiou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(tiou(&a, &a), 1.0);
        }

        #[test]
        fn diou_in_range(a in arb_segment(), b in arb_segment()) {
            let l = diou_loss(&a, &b).loss;
            prop_assert!((0.0..2.0).contains(&l), "loss {}", l);
            prop_assert_eq!(diou_loss(&a, &a).loss, 0.0);
        }

        #[test]
        fn suppression_properties(cands in arb_candidates(), thr in 0.05f64..0.95) {
            let nms = suppress(&cands, thr, SuppressMode::Nms);
            prop_assert!(nms.len() <= cands.len());
            for d in &nms {
                prop_assert!(cands.contains(d));
            }
            for w in nms.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            prop_assert_eq!(suppress(&nms, thr, SuppressMode::Nms), nms.clone());

            let nmw = suppress(&cands, thr, SuppressMode::Nmw);
            prop_assert_eq!(nmw.len(), nms.len());
            let seed_scores: Vec<f64> = nms.iter().map(|d| d.score).collect();
            let mut got: Vec<f64> = nmw.iter().map(|d| d.score).collect();
            let mut want = seed_scores.clone();
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assert_eq!(got, want);
        }
    }
}
