//! Finite-difference verification of the hand-written reverse passes.
//!
//! Every check reduces an operation to a scalar (outputs dotted with a fixed
//! random probe, or the loss itself), then compares the analytic gradient
//! with central differences over every parameter and input element. The
//! reported error is `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign, generate_anchors, AnchorConfig};
use crate::geometry::Segment;
use crate::losses::{detection_loss, focal_loss, LossConfig};
use crate::net::tensor::{relu_backward_inplace, relu_inplace};
use crate::net::{
    Conv1d, Detector, NetConfig, Param, PredictionHead, Projection, SpatialReduction, SrmMode, TemporalDownsample,
    TemporalPyramid, Tensor, TDM_LAYERS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    /// Channel width used for every layer of the reduced network.
    pub channels: usize,
    pub head_convs: usize,
    pub num_classes: usize,
    /// Clip length in frames for the full-loss check.
    pub clip_len: usize,
    pub step: f64,
    /// Tolerance for single convolutions.
    pub conv_tolerance: f64,
    /// Tolerance for composite modules and the full loss.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            head_convs: 2,
            num_classes: 2,
            clip_len: 128,
            step: 1e-5,
            conv_tolerance: 1e-6,
            tolerance: 1e-4,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= self.tolerance
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<4} {:<28} n={:<6} max_rel_err={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_error,
            self.tolerance
        )
    }
}

/// Relative error between two gradient vectors, normalised by the larger sup norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        worst
    } else {
        worst / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares `analytic` against central differences of `f`.
pub fn grad_check(
    name: &str,
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> GradReport {
    let numeric = numeric_gradient(f, x, step);
    GradReport {
        name: name.to_string(),
        checked: x.len(),
        max_rel_error: relative_error(analytic, &numeric),
        tolerance,
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Fixed random weights used to reduce tensor outputs to a scalar.
fn probe(shape: &[usize], salt: u64) -> Tensor<f64> {
    random_tensor(shape, &mut ChaCha8Rng::seed_from_u64(0x5eed ^ salt))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn flatten(params: &[&mut Param<f64>]) -> Vec<f64> {
    params.iter().flat_map(|p| p.value.data().to_vec()).collect()
}

fn unflatten(params: Vec<&mut Param<f64>>, values: &[f64]) {
    let mut at = 0;
    for p in params {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&values[at..at + n]);
        at += n;
    }
}

fn grads(params: Vec<&mut Param<f64>>) -> Vec<f64> {
    params.iter().flat_map(|p| p.grad.data().to_vec()).collect()
}

/// A module with learned parameters, a scalar objective over an input, and
/// a backward pass returning the input gradient.
struct Probe<'a, M> {
    params: &'a dyn Fn(&mut M) -> Vec<&mut Param<f64>>,
    value: &'a dyn Fn(&M, &Tensor<f64>) -> f64,
    backward: &'a dyn Fn(&mut M, &Tensor<f64>) -> Option<Tensor<f64>>,
}

fn check_module<M: Clone>(
    name: &str,
    model: &M,
    input: &Tensor<f64>,
    probe: Probe<'_, M>,
    step: f64,
    tolerance: f64,
) -> GradReport {
    let mut m = model.clone();
    for p in (probe.params)(&mut m) {
        p.zero_grad();
    }
    let input_grad = (probe.backward)(&mut m, input);
    let mut analytic = grads((probe.params)(&mut m));
    let theta = flatten(&(probe.params)(&mut model.clone()));
    let n_params = theta.len();

    let mut x: Vec<f64> = theta.clone();
    if input_grad.is_some() {
        x.extend_from_slice(input.data());
    }
    if let Some(g) = &input_grad {
        analytic.extend_from_slice(g.data());
    }
    let mut scratch = model.clone();
    let shape = input.shape().to_vec();
    let f = |v: &[f64]| {
        unflatten((probe.params)(&mut scratch), &v[..n_params]);
        let inp = if v.len() > n_params {
            Tensor::from_vec(&shape, v[n_params..].to_vec()).unwrap()
        } else {
            input.clone()
        };
        (probe.value)(&scratch, &inp)
    };
    grad_check(name, f, &x, &analytic, step, tolerance)
}

fn check_conv(name: &str, conv: &Conv1d<f64>, input: &Tensor<f64>, step: f64, tol: f64) -> GradReport {
    let out_shape = conv.forward(input).unwrap().shape().to_vec();
    let r = probe(&out_shape, 1);
    check_module(
        name,
        conv,
        input,
        Probe {
            params: &|c: &mut Conv1d<f64>| c.params_mut().into_iter().collect(),
            value: &|c, x| dot(&c.forward(x).unwrap(), &r),
            backward: &|c, x| c.backward(x, &r, true).unwrap(),
        },
        step,
        tol,
    )
}

pub fn check_projection(cfg: &GradcheckConfig) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let proj = Projection::<f64>::new(3, cfg.channels, false, &mut rng);
    let input = random_tensor(&[3, 4, 2, 2], &mut rng);
    let out_shape = proj.forward(&input).unwrap().shape().to_vec();
    let r = probe(&out_shape, 2);
    check_module(
        "pointwise projection",
        &proj,
        &input,
        Probe {
            params: &|p: &mut Projection<f64>| p.params_mut().into_iter().collect(),
            value: &|p, x| dot(&p.forward(x).unwrap(), &r),
            backward: &|p, x| {
                let out = p.forward(x).unwrap();
                p.backward(x, &out, &r).unwrap();
                None
            },
        },
        cfg.step,
        cfg.tolerance,
    )
}

pub fn check_srm(cfg: &GradcheckConfig, mode: SrmMode) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 1);
    let mut srm = SpatialReduction::<f64>::new(mode, cfg.channels);
    if let Some(w) = srm.weight.as_mut() {
        w.value = random_tensor(w.value.shape(), &mut rng);
    }
    let input = random_tensor(&[cfg.channels, 5, 4, 4], &mut rng);
    let r = probe(&[cfg.channels, 5], 3);
    let name = match mode {
        SrmMode::Avg => "srm avg",
        SrmMode::Max => "srm max",
        SrmMode::Conv => "srm conv",
    };
    check_module(
        name,
        &srm,
        &input,
        Probe {
            params: &|s: &mut SpatialReduction<f64>| s.params_mut(),
            value: &|s, x| dot(&s.forward(x).unwrap(), &r),
            backward: &|s, x| Some(s.backward(x, &r).unwrap()),
        },
        cfg.step,
        cfg.tolerance,
    )
}

pub fn check_tdm(cfg: &GradcheckConfig) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 2);
    let tdm = TemporalDownsample::<f64>::new(cfg.channels, cfg.channels, TDM_LAYERS, &mut rng);
    let input = random_tensor(&[cfg.channels, 32], &mut rng);
    let probes: Vec<Tensor<f64>> = tdm
        .forward(&input)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, t)| probe(t.shape(), 10 + i as u64))
        .collect();
    check_module(
        "tdm",
        &tdm,
        &input,
        Probe {
            params: &|t: &mut TemporalDownsample<f64>| t.params_mut(),
            value: &|t, x| t.forward(x).unwrap().iter().zip(&probes).map(|(a, b)| dot(a, b)).sum(),
            backward: &|t, x| {
                let levels = t.forward(x).unwrap();
                t.backward(&levels, probes.clone(), true).unwrap()
            },
        },
        cfg.step,
        cfg.tolerance,
    )
}

pub fn check_tfpn(cfg: &GradcheckConfig) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 3);
    let c = cfg.channels;
    let fpn = TemporalPyramid::<f64>::new(&[c; 5], c, &mut rng);
    // the five levels are packed into one (c, 16+8+4+2+1) input for the probe
    let sizes = [16usize, 8, 4, 2, 1];
    let total: usize = sizes.iter().sum();
    let input = random_tensor(&[c, total], &mut rng);
    let split = move |x: &Tensor<f64>| -> Vec<Tensor<f64>> {
        let mut at = 0;
        sizes
            .iter()
            .map(|&s| {
                let mut t = Tensor::zeros(&[c, s]);
                for ch in 0..c {
                    t.row_mut(ch).copy_from_slice(&x.row(ch)[at..at + s]);
                }
                at += s;
                t
            })
            .collect()
    };
    let join = move |parts: &[Tensor<f64>]| -> Tensor<f64> {
        let mut out = Tensor::zeros(&[c, total]);
        let mut at = 0;
        for p in parts {
            let s = p.dim(1);
            for ch in 0..c {
                out.row_mut(ch)[at..at + s].copy_from_slice(p.row(ch));
            }
            at += s;
        }
        out
    };
    let probes: Vec<Tensor<f64>> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| probe(&[c, s], 20 + i as u64))
        .collect();
    check_module(
        "tfpn",
        &fpn,
        &input,
        Probe {
            params: &|f: &mut TemporalPyramid<f64>| f.params_mut(),
            value: &|f, x| {
                let trace = f.forward(&split(x)).unwrap();
                trace.outputs.iter().zip(&probes).map(|(a, b)| dot(a, b)).sum()
            },
            backward: &|f, x| {
                let levels = split(x);
                let trace = f.forward(&levels).unwrap();
                Some(join(&f.backward(&levels, &trace, &probes).unwrap()))
            },
        },
        cfg.step,
        cfg.tolerance,
    )
}

pub fn check_tpm(cfg: &GradcheckConfig) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 4);
    let mut head = PredictionHead::<f64>::new(cfg.channels, cfg.head_convs, cfg.num_classes, 5, 0.01, &mut rng);
    // output layers start near zero; give them weight so every path is exercised
    for conv in [&mut head.cls_out, &mut head.reg_out] {
        conv.weight.value = random_tensor(conv.weight.value.shape(), &mut rng);
    }
    let input = random_tensor(&[cfg.channels, 6], &mut rng);
    let out = head.forward(&input).unwrap();
    let (rc, rr) = (probe(out.cls.shape(), 30), probe(out.reg.shape(), 31));
    check_module(
        "tpm",
        &head,
        &input,
        Probe {
            params: &|h: &mut PredictionHead<f64>| h.params_mut(),
            value: &|h, x| {
                let o = h.forward(x).unwrap();
                dot(&o.cls, &rc) + dot(&o.reg, &rr)
            },
            backward: &|h, x| {
                let o = h.forward(x).unwrap();
                Some(h.backward(&o, &rc, &rr).unwrap())
            },
        },
        cfg.step,
        cfg.tolerance,
    )
}

pub fn check_focal(cfg: &GradcheckConfig) -> GradReport {
    let loss = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 5);
    let logits: Vec<f64> = (0..64).map(|_| rng.random_range(-10.0..10.0)).collect();
    let targets: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
    let analytic: Vec<f64> = logits
        .iter()
        .zip(&targets)
        .map(|(&x, &t)| focal_loss(x, t, &loss).1)
        .collect();
    let f = |v: &[f64]| {
        v.iter()
            .zip(&targets)
            .map(|(&x, &t)| focal_loss(x, t, &loss).0)
            .sum::<f64>()
    };
    grad_check("focal loss", f, &logits, &analytic, cfg.step, cfg.tolerance)
}

/// The full detection loss from a pooled pixel map, with respect to every
/// parameter of a reduced-width detector (conv-mode spatial reduction).
pub fn check_detection_loss(cfg: &GradcheckConfig) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 6);
    let net_cfg = NetConfig {
        backbone_channels: cfg.channels,
        tdm_channels: cfg.channels,
        fpn_channels: cfg.channels,
        head_convs: cfg.head_convs,
        num_classes: cfg.num_classes,
        anchors_per_position: 5,
        srm_mode: SrmMode::Conv,
        frozen: false,
        prior: 0.01,
    };
    let mut det = Detector::<f64>::new(&net_cfg, &mut rng).unwrap();
    if let Some(w) = det.srm.weight.as_mut() {
        w.value = random_tensor(w.value.shape(), &mut rng);
    }
    for conv in [&mut det.head.cls_out, &mut det.head.reg_out] {
        conv.weight.value = random_tensor(conv.weight.value.shape(), &mut rng).map(|v| 0.3 * v);
    }
    let acfg = AnchorConfig::default();
    let anchors = generate_anchors::<f64>(&acfg, cfg.clip_len).unwrap();
    let gts: Vec<(Segment<f64>, usize)> = vec![
        (Segment::new(10.0, 37.0).unwrap(), 0),
        (Segment::new(52.0, 110.0).unwrap(), cfg.num_classes - 1),
    ];
    let assignment = assign(&anchors, &gts, &acfg);
    let loss_cfg = LossConfig::default();
    let k = cfg.num_classes;
    let pooled = random_tensor(&[3, cfg.clip_len / 8, 4, 4], &mut rng);

    check_module(
        "detection loss (all params)",
        &det,
        &pooled,
        Probe {
            params: &|d: &mut Detector<f64>| d.params_mut(),
            value: &|d, x| {
                let trace = d.forward_pooled(x.clone()).unwrap();
                detection_loss(&trace.outputs(), &anchors, &assignment, &gts, k, &loss_cfg)
                    .unwrap()
                    .total
            },
            backward: &|d, x| {
                let trace = d.forward_pooled(x.clone()).unwrap();
                let loss = detection_loss(&trace.outputs(), &anchors, &assignment, &gts, k, &loss_cfg).unwrap();
                d.backward(&trace, &loss.grads).unwrap();
                None
            },
        },
        cfg.step,
        cfg.tolerance,
    )
}

/// Runs every check; all must pass.
pub fn run_suite(cfg: &GradcheckConfig) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.channels;
    let mut reports = Vec::new();

    let mut conv = Conv1d::<f64>::kaiming("conv", c, c + 1, 3, 1, 1, &mut rng);
    conv.bias.value = random_tensor(&[c + 1], &mut rng);
    let x = random_tensor(&[c, 12], &mut rng);
    reports.push(check_conv("conv1d k3 s1", &conv, &x, cfg.step, cfg.conv_tolerance));
    let strided = Conv1d::<f64>::kaiming("conv", c, c, 3, 2, 1, &mut rng);
    reports.push(check_conv("conv1d k3 s2", &strided, &x, cfg.step, cfg.conv_tolerance));
    let pointwise = Conv1d::<f64>::kaiming("conv", c, c, 1, 1, 0, &mut rng);
    reports.push(check_conv(
        "conv1d pointwise",
        &pointwise,
        &x,
        cfg.step,
        cfg.conv_tolerance,
    ));

    reports.push(check_projection(cfg));
    for mode in [SrmMode::Avg, SrmMode::Max, SrmMode::Conv] {
        reports.push(check_srm(cfg, mode));
    }
    reports.push(check_tdm(cfg));
    reports.push(check_tfpn(cfg));
    reports.push(check_tpm(cfg));
    reports.push(check_focal(cfg));
    reports.push(check_detection_loss(cfg));
    reports
}

/// ReLU applied through the same helpers the network uses; a linear
/// sanity op for the checker itself.
pub fn check_linear_op(cfg: &GradcheckConfig) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 7);
    let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..16).map(|_| rng.random_range(0.1..1.0)).collect();
    let f = |v: &[f64]| {
        let mut t = Tensor::from_vec(&[16], v.iter().zip(&a).map(|(p, q)| p * q).collect()).unwrap();
        relu_inplace(&mut t);
        t.data().iter().sum::<f64>()
    };
    let mut analytic = Tensor::from_vec(&[16], a.clone()).unwrap();
    let out = Tensor::from_vec(&[16], x.iter().zip(&a).map(|(p, q)| (p * q).max(0.0)).collect()).unwrap();
    relu_backward_inplace(&out, &mut analytic);
    grad_check("linear", f, &x, analytic.data(), cfg.step, cfg.conv_tolerance)
}


#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let reports = run_suite(&GradcheckConfig::default());
        for r in &reports {
            println!("{r}");
        }
        assert!(reports.iter().all(GradReport::passed));
    }
}
