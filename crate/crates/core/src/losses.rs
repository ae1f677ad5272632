//! Training objective: sigmoid focal loss over every non-ignored anchor and
//! class, plus distance-IoU regression on decoded positive anchors, both
//! normalised by the positive count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{decode, AnchorError, AnchorLabel, AnchorSet, Assignment, LOG_SCALE_CLAMP};
use crate::geometry::{diou_loss, Segment};
use crate::net::{HeadOutputs, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("head outputs do not match the anchor set: {0}")]
    Shape(String),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            reg_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(format!("focal_alpha must lie in (0,1), got {}", self.focal_alpha));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(format!("focal_gamma must be non-negative, got {}", self.focal_gamma));
        }
        if !(self.reg_weight > 0.0) {
            return Err(format!("reg_weight must be positive, got {}", self.reg_weight));
        }
        Ok(())
    }
}

/// `log(sigmoid(x))` without overflow.
#[inline]
fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sigmoid focal loss `-alpha_t (1 - p_t)^gamma log(p_t)` and its derivative
/// with respect to the logit.
pub fn focal_loss<T: Scalar>(logit: T, target: bool, cfg: &LossConfig) -> (T, T) {
    let gamma = T::lit(cfg.focal_gamma);
    // z is the logit of p_t, so p_t = sigmoid(z) and 1 - p_t = sigmoid(-z)
    let (z, alpha, sign) = if target {
        (logit, T::lit(cfg.focal_alpha), T::one())
    } else {
        (-logit, T::lit(1.0 - cfg.focal_alpha), -T::one())
    };
    let p_t = sigmoid(z);
    let q = sigmoid(-z);
    let log_p = log_sigmoid(z);
    let modulator = if cfg.focal_gamma == 0.0 {
        T::one()
    } else {
        q.powf(gamma)
    };
    let loss = -alpha * modulator * log_p;
    // dL/dz = alpha q^gamma (gamma p_t log p_t - q)
    let dz = alpha * modulator * (gamma * p_t * log_p - q);
    (loss, sign * dz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub cls: T,
    pub reg: T,
    pub total: T,
    pub num_positive: usize,
    pub grads: HeadOutputs<T>,
}

fn check_shapes<T: Scalar>(
    out: &HeadOutputs<T>,
    anchors: &AnchorSet<T>,
    assignment: &Assignment,
    num_classes: usize,
) -> Result<(), LossError> {
    let a = anchors.scales();
    if out.cls.len() != anchors.num_levels() || out.reg.len() != anchors.num_levels() {
        return Err(LossError::Shape(format!(
            "{} cls / {} reg levels for {} anchor levels",
            out.cls.len(),
            out.reg.len(),
            anchors.num_levels()
        )));
    }
    for (l, &pos) in anchors.positions().iter().enumerate() {
        if out.cls[l].shape() != [num_classes * a, pos] || out.reg[l].shape() != [2 * a, pos] {
            return Err(LossError::Shape(format!(
                "level {l}: cls {:?}, reg {:?}, expected ({}, {pos}) and ({}, {pos})",
                out.cls[l].shape(),
                out.reg[l].shape(),
                num_classes * a,
                2 * a
            )));
        }
    }
    if assignment.labels.len() != anchors.len() {
        return Err(LossError::Shape(format!(
            "{} labels for {} anchors",
            assignment.labels.len(),
            anchors.len()
        )));
    }
    Ok(())
}

/// Decoded prediction of anchor `flat` and the raw `(dc, dl)` it came from.
pub fn predicted_offsets<T: Scalar>(out: &HeadOutputs<T>, anchors: &AnchorSet<T>, flat: usize) -> (T, T) {
    let a = anchors.scales();
    let (level, local) = anchors.locate(flat);
    let (pos, scale) = (local / a, local % a);
    let reg = &out.reg[level];
    (reg.row(2 * scale)[pos], reg.row(2 * scale + 1)[pos])
}

/// Classification logit of anchor `flat` for class `k`.
pub fn class_logit<T: Scalar>(
    out: &HeadOutputs<T>,
    anchors: &AnchorSet<T>,
    num_classes: usize,
    flat: usize,
    k: usize,
) -> T {
    let a = anchors.scales();
    let (level, local) = anchors.locate(flat);
    let (pos, scale) = (local / a, local % a);
    out.cls[level].row(scale * num_classes + k)[pos]
}

pub fn detection_loss<T: Scalar>(
    out: &HeadOutputs<T>,
    anchors: &AnchorSet<T>,
    assignment: &Assignment,
    gts: &[(Segment<T>, usize)],
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<LossOutput<T>, LossError> {
    check_shapes(out, anchors, assignment, num_classes)?;
    let a = anchors.scales();
    let num_positive = assignment.count_positive();
    let norm = T::one() / T::from_usize_lossy(num_positive.max(1));
    let lambda = T::lit(cfg.reg_weight);
    let mut grads = HeadOutputs::zeros_like(out);
    let mut cls_sum = T::zero();
    let mut reg_sum = T::zero();

    for (level, &positions) in anchors.positions().iter().enumerate() {
        let offset = anchors.level_offsets()[level];
        let cls = &out.cls[level];
        let reg = &out.reg[level];
        for pos in 0..positions {
            for scale in 0..a {
                let flat = offset + pos * a + scale;
                let label = assignment.labels[flat];
                let matched = match label {
                    AnchorLabel::Ignored => continue,
                    AnchorLabel::Negative => None,
                    AnchorLabel::Positive(g) => Some(g),
                };
                let target_class = matched.map(|g| gts[g].1);
                for k in 0..num_classes {
                    let row = scale * num_classes + k;
                    let (l, d) = focal_loss(cls.row(row)[pos], target_class == Some(k), cfg);
                    cls_sum += l;
                    grads.cls[level].row_mut(row)[pos] = d * norm;
                }
                if let Some(g) = matched {
                    let (dc, dl) = (reg.row(2 * scale)[pos], reg.row(2 * scale + 1)[pos]);
                    let anchor = anchors.level(level)[pos * a + scale];
                    let pred = decode(&anchor, dc, dl)?;
                    let d = diou_loss(&pred, &gts[g].0);
                    reg_sum += d.loss;
                    // start = c + dc*L - len'/2, end = c + dc*L + len'/2, len' = L*exp(dl)
                    let half = pred.length() / T::lit(2.0);
                    let g_dc = anchor.length() * (d.grad_start + d.grad_end);
                    let g_dl = if dl.abs() > T::lit(LOG_SCALE_CLAMP) {
                        T::zero()
                    } else {
                        half * (d.grad_end - d.grad_start)
                    };
                    let scale_reg = lambda * norm;
                    grads.reg[level].row_mut(2 * scale)[pos] = g_dc * scale_reg;
                    grads.reg[level].row_mut(2 * scale + 1)[pos] = g_dl * scale_reg;
                }
            }
        }
    }
    let cls = cls_sum * norm;
    let reg = lambda * reg_sum * norm;
    Ok(LossOutput {
        cls,
        reg,
        total: cls + reg,
        num_positive,
        grads,
    })
}

/// Scales every gradient in place, e.g. to average over a batch.
pub fn scale_grads<T: Scalar>(grads: &mut HeadOutputs<T>, factor: T) {
    for t in grads.cls.iter_mut().chain(grads.reg.iter_mut()) {
        for v in t.data_mut() {
            *v *= factor;
        }
    }
}

/// Builds zero-initialised head outputs matching an anchor set.
pub fn empty_outputs<T: Scalar>(anchors: &AnchorSet<T>, num_classes: usize) -> HeadOutputs<T> {
    let a = anchors.scales();
    HeadOutputs {
        cls: anchors
            .positions()
            .iter()
            .map(|&p| Tensor::zeros(&[num_classes * a, p]))
            .collect(),
        reg: anchors
            .positions()
            .iter()
            .map(|&p| Tensor::zeros(&[2 * a, p]))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{assign, encode, generate_anchors, AnchorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn focal_examples() {
        let cfg = LossConfig::default();
        let (l, _) = focal_loss(logit(0.9), true, &cfg);
        assert!((l - 0.25 * 0.01 * -(0.9f64.ln())).abs() < 1e-12);
        assert!((l - 0.00026341).abs() < 1e-8);
        let (l, _) = focal_loss(0.0, true, &cfg);
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.04332).abs() < 1e-5);
        let (l, d) = focal_loss(50.0f64, true, &cfg);
        assert!(l < 1e-40 && d.abs() < 1e-40);
        let (l, d) = focal_loss(-50.0f64, false, &cfg);
        assert!(l < 1e-40 && d.abs() < 1e-40);
        let (l, d) = focal_loss(-50.0f64, true, &cfg);
        assert!(l.is_finite() && d.is_finite() && (l - 0.25 * 50.0).abs() < 1e-9);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let h = 1e-5;
        for i in 0..=400 {
            let x = -10.0 + 0.05 * i as f64;
            for target in [true, false] {
                let (_, d) = focal_loss(x, target, &cfg);
                let num = (focal_loss(x + h, target, &cfg).0 - focal_loss(x - h, target, &cfg).0) / (2.0 * h);
                let rel = (d - num).abs() / d.abs().max(num.abs()).max(1e-300);
                assert!(rel <= 1e-8 || (d - num).abs() < 1e-14, "x={x} t={target}: {d} vs {num}");
            }
        }
    }

    #[test]
    fn gamma_zero_half_alpha_is_half_bce() {
        let cfg = LossConfig {
            focal_alpha: 0.5,
            focal_gamma: 0.0,
            reg_weight: 1.0,
        };
        for x in [-7.0, -1.0, 0.0, 0.3, 4.0] {
            let p = 1.0 / (1.0 + f64::exp(-x));
            let bce1 = -p.ln();
            let bce0 = -(1.0 - p).ln();
            assert!((focal_loss(x, true, &cfg).0 - 0.5 * bce1).abs() < 1e-12);
            assert!((focal_loss(x, false, &cfg).0 - 0.5 * bce0).abs() < 1e-12);
        }
    }

    struct Instance {
        anchors: AnchorSet<f64>,
        gts: Vec<(Segment<f64>, usize)>,
        assignment: Assignment,
        out: HeadOutputs<f64>,
    }

    fn random_instance(seed: u64, k: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors::<f64>(&cfg, 128).unwrap();
        let gts: Vec<(Segment<f64>, usize)> = (0..rng.random_range(0..4))
            .map(|_| {
                let s = rng.random_range(0.0..100.0);
                let l = rng.random_range(8.0..60.0);
                (Segment::new(s, s + l).unwrap(), rng.random_range(0..k))
            })
            .collect();
        let assignment = assign(&anchors, &gts, &cfg);
        let mut out = empty_outputs(&anchors, k);
        for t in out.cls.iter_mut().chain(out.reg.iter_mut()) {
            for v in t.data_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        Instance {
            anchors,
            gts,
            assignment,
            out,
        }
    }

    /// Naive summation walking anchors through the public accessors.
    fn brute_force(inst: &Instance, k: usize, cfg: &LossConfig) -> f64 {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut cls = 0.0;
        let mut reg = 0.0;
        let mut npos = 0usize;
        for flat in 0..inst.anchors.len() {
            let label = inst.assignment.labels[flat];
            if label == AnchorLabel::Ignored {
                continue;
            }
            let target = match label {
                AnchorLabel::Positive(g) => {
                    npos += 1;
                    Some(inst.gts[g].1)
                }
                _ => None,
            };
            for c in 0..k {
                let p = sig(class_logit(&inst.out, &inst.anchors, k, flat, c));
                let (pt, at) = if target == Some(c) {
                    (p, cfg.focal_alpha)
                } else {
                    (1.0 - p, 1.0 - cfg.focal_alpha)
                };
                cls += -at * (1.0 - pt).powf(cfg.focal_gamma) * pt.ln();
            }
            if let AnchorLabel::Positive(g) = label {
                let (dc, dl) = predicted_offsets(&inst.out, &inst.anchors, flat);
                let anchor = inst.anchors.get(flat);
                let c = anchor.center() + dc * anchor.length();
                let len = anchor.length() * dl.exp();
                let (ps, pe) = (c - len / 2.0, c + len / 2.0);
                let (gs, ge) = (inst.gts[g].0.start(), inst.gts[g].0.end());
                let inter = (pe.min(ge) - ps.max(gs)).max(0.0);
                let union = (pe - ps) + (ge - gs) - inter;
                let u = pe.max(ge) - ps.min(gs);
                let rho = (ps + pe) / 2.0 - (gs + ge) / 2.0;
                reg += 1.0 - inter / union + rho * rho / (u * u);
            }
        }
        let n = npos.max(1) as f64;
        cls / n + cfg.reg_weight * reg / n
    }

    #[test]
    fn matches_brute_force_summation() {
        let cfg = LossConfig::default();
        for seed in 0..40 {
            let inst = random_instance(seed, 3);
            let got = detection_loss(&inst.out, &inst.anchors, &inst.assignment, &inst.gts, 3, &cfg).unwrap();
            let want = brute_force(&inst, 3, &cfg);
            assert!(got.total >= 0.0);
            assert!(
                (got.total - want).abs() <= 1e-10 * want.abs().max(1.0),
                "seed {seed}: {} vs {want}",
                got.total
            );
        }
    }

    #[test]
    fn ignored_anchors_get_zero_gradient() {
        let cfg = LossConfig::default();
        for seed in 0..10 {
            let inst = random_instance(seed, 2);
            let base = detection_loss(&inst.out, &inst.anchors, &inst.assignment, &inst.gts, 2, &cfg).unwrap();
            for flat in 0..inst.anchors.len() {
                if inst.assignment.labels[flat] != AnchorLabel::Ignored {
                    continue;
                }
                let (level, local) = inst.anchors.locate(flat);
                let (pos, scale) = (local / 5, local % 5);
                for c in 0..2 {
                    assert_eq!(base.grads.cls[level].row(scale * 2 + c)[pos], 0.0);
                }
                let mut perturbed = inst.out.clone();
                perturbed.cls[level].row_mut(scale * 2)[pos] += 3.0;
                let again = detection_loss(&perturbed, &inst.anchors, &inst.assignment, &inst.gts, 2, &cfg).unwrap();
                assert_eq!(again.total, base.total);
            }
        }
    }

    #[test]
    fn no_gts_means_no_regression() {
        let cfg = LossConfig::default();
        let anchors = generate_anchors::<f64>(&AnchorConfig::default(), 768).unwrap();
        let assignment = assign(&anchors, &[], &AnchorConfig::default());
        let mut out = empty_outputs(&anchors, 3);
        for t in &mut out.cls {
            t.fill(-(99.0f64).ln());
        }
        let res = detection_loss(&out, &anchors, &assignment, &[], 3, &cfg).unwrap();
        assert_eq!(res.reg, 0.0);
        assert_eq!(res.num_positive, 0);
        assert!(res.cls > 0.0);
    }

    #[test]
    fn perfect_prediction_loss_vanishes() {
        let cfg = LossConfig::default();
        let acfg = AnchorConfig::default();
        let anchors = generate_anchors::<f64>(&acfg, 128).unwrap();
        let gt = Segment::new(30.0, 62.0).unwrap();
        let gts = vec![(gt, 1)];
        let assignment = assign(&anchors, &gts, &acfg);
        assert!(assignment.count_positive() >= 1);
        let mut out = empty_outputs(&anchors, 2);
        for t in &mut out.cls {
            t.fill(-40.0);
        }
        for flat in 0..anchors.len() {
            if let AnchorLabel::Positive(_) = assignment.labels[flat] {
                let (level, local) = anchors.locate(flat);
                let (pos, scale) = (local / 5, local % 5);
                out.cls[level].row_mut(scale * 2 + 1)[pos] = 40.0;
                let (dc, dl) = encode(&anchors.get(flat), &gt);
                out.reg[level].row_mut(2 * scale)[pos] = dc;
                out.reg[level].row_mut(2 * scale + 1)[pos] = dl;
            }
        }
        let res = detection_loss(&out, &anchors, &assignment, &gts, 2, &cfg).unwrap();
        assert!(res.total < 1e-12, "{}", res.total);
    }

    #[test]
    fn invariant_to_gt_order() {
        let cfg = LossConfig::default();
        let acfg = AnchorConfig::default();
        for seed in 0..10 {
            let inst = random_instance(seed, 3);
            let mut rev = inst.gts.clone();
            rev.reverse();
            let a1 = assign(&inst.anchors, &rev, &acfg);
            let l0 = detection_loss(&inst.out, &inst.anchors, &inst.assignment, &inst.gts, 3, &cfg).unwrap();
            let l1 = detection_loss(&inst.out, &inst.anchors, &a1, &rev, 3, &cfg).unwrap();
            assert!((l0.total - l1.total).abs() <= 1e-10 * l0.total.max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let inst = random_instance(1, 3);
        let cfg = LossConfig::default();
        assert!(matches!(
            detection_loss(&inst.out, &inst.anchors, &inst.assignment, &inst.gts, 2, &cfg),
            Err(LossError::Shape(_))
        ));
    }
}
