//! SGD with momentum and weight decay under a warmup + cosine-restart schedule.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign, generate_anchors, AnchorConfig, AnchorError};
use crate::augment::{AugmentError, AugmentPolicy};
use crate::data::Dataset;
use crate::geometry::Segment;
use crate::inference::forward_clip;
use crate::io::{write_atomic, IoError};
use crate::losses::{detection_loss, scale_grads, LossConfig, LossError};
use crate::net::{Detector, NetError, Param, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at iteration {iter} (epoch {epoch}): cls {cls}, reg {reg}; batch {batch:?}")]
    NonFiniteLoss {
        iter: usize,
        epoch: usize,
        cls: f64,
        reg: f64,
        batch: Vec<BatchItem>,
    },
}

/// Which window of which video went into a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub video: String,
    pub start: usize,
    pub num_gts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_iters: usize,
    pub warmup_start_lr: f64,
    pub cycle_epochs: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Parameters whose name contains any of these skip weight decay.
    pub no_decay: Vec<String>,
    pub batch_size: usize,
    /// Training clip length in frames.
    pub window: usize,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 0.01,
            lr_min: 0.0001,
            warmup_iters: 500,
            warmup_start_lr: 0.001,
            cycle_epochs: 100,
            total_epochs: 1200,
            momentum: 0.9,
            weight_decay: 0.0001,
            no_decay: Vec::new(),
            batch_size: 16,
            window: 768,
            checkpoint_every: 0,
            grad_clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 200 epochs in 50-epoch cycles, batch 4.
    pub fn desk() -> Self {
        Self {
            total_epochs: 200,
            cycle_epochs: 50,
            batch_size: 4,
            warmup_iters: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return err(format!("need 0 < lr_min ({}) < lr_max ({})", self.lr_min, self.lr_max));
        }
        if !(self.warmup_start_lr > 0.0) {
            return err("warmup_start_lr must be positive".into());
        }
        if self.cycle_epochs == 0 || self.batch_size == 0 || self.window == 0 {
            return err("cycle_epochs, batch_size and window must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return err("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        Ok(())
    }
}

/// Learning rate at a global iteration: linear warmup from `warmup_start_lr`
/// to `lr_max`, then cosine annealing to `lr_min` restarting every
/// `cycle_epochs`, with cycles counted from the end of warmup. The last
/// iteration of each cycle sits exactly at `lr_min`.
pub fn lr_at(iter: usize, iters_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warmup_iters {
        let f = iter as f64 / cfg.warmup_iters as f64;
        return cfg.warmup_start_lr + (cfg.lr_max - cfg.warmup_start_lr) * f;
    }
    let cycle = (cfg.cycle_epochs * iters_per_epoch.max(1)).max(1);
    let pos = (iter - cfg.warmup_iters) % cycle;
    let frac = if cycle > 1 {
        pos as f64 / (cycle - 1) as f64
    } else {
        0.0
    };
    cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * frac).cos()) / 2.0
}

/// One momentum step: `g' = g + wd * p`, `v = m * v + g'`, `p -= lr * v`.
/// Frozen parameters are left untouched.
pub fn sgd_update<T: Scalar>(
    param: &mut Param<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if param.frozen {
        return Ok(());
    }
    if !param.grad.all_finite() {
        return Err(TrainError::NonFiniteGradient {
            param: param.name.clone(),
        });
    }
    let (lr, m, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, g), v) in param
        .value
        .data_mut()
        .iter_mut()
        .zip(param.grad.data())
        .zip(velocity.data_mut())
    {
        let g = *g + wd * *p;
        *v = m * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every parameter of a model, in `params_mut` order.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &Detector<T>) -> Self {
        Self {
            velocity: model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Detector<T>, lr: f64, cfg: &TrainConfig) -> Result<(), TrainError> {
        let mut params = model.params_mut();
        if let Some(max) = cfg.grad_clip_norm {
            let norm = params
                .iter()
                .filter(|p| !p.frozen)
                .flat_map(|p| p.grad.data().iter().map(|g| g.as_f64().powi(2)))
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let s = T::lit(max / norm);
                for p in params.iter_mut() {
                    p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
                }
            }
        }
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            let wd = if cfg.no_decay.iter().any(|n| p.name.contains(n.as_str())) {
                0.0
            } else {
                cfg.weight_decay
            };
            sgd_update(p, v, lr, cfg.momentum, wd)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("iter,epoch,lr,cls_loss,reg_loss,total\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.8},{:.8},{:.8},{:.8}",
            r.iter, r.epoch, r.lr, r.cls_loss, r.reg_loss, r.total
        )
        .unwrap();
    }
    out
}

/// Everything `fit` needs besides the data and the model.
#[derive(Debug, Clone)]
pub struct FitOptions<'a> {
    pub train: &'a TrainConfig,
    pub anchors: &'a AnchorConfig,
    pub loss: &'a LossConfig,
    pub augment: &'a AugmentPolicy,
    /// Directory for `metrics.csv` and checkpoints.
    pub out_dir: Option<&'a Path>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

fn save_progress<T: Scalar>(
    model: &Detector<T>,
    log: &[LogRow],
    dir: &Path,
    name: &str,
) -> Result<PathBuf, TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::fs(dir, e))?;
    let path = dir.join(name);
    model.to_checkpoint().save(&path)?;
    write_atomic(&dir.join("metrics.csv"), log_csv(log).as_bytes())?;
    Ok(path)
}

/// Trains `model` on augmented windows of `data`. Each epoch visits every
/// video once in shuffled order; gradients are averaged over the batch.
pub fn fit<T: Scalar>(
    data: &Dataset,
    model: &mut Detector<T>,
    opts: &FitOptions<'_>,
) -> Result<FitSummary, TrainError> {
    let cfg = opts.train;
    cfg.validate()?;
    opts.augment.validate()?;
    if data.videos.is_empty() && cfg.total_epochs > 0 {
        return Err(TrainError::Config("empty training set".into()));
    }
    let anchors = generate_anchors::<T>(opts.anchors, cfg.window)?;
    let k = model.cfg.num_classes;
    let mut sgd = Sgd::new(model);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(opts.augment.seed ^ cfg.seed.rotate_left(32));
    let iters_per_epoch = data.videos.len().div_ceil(cfg.batch_size);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut iter = 0;
    let mut order: Vec<usize> = (0..data.videos.len()).collect();

    for epoch in 0..cfg.total_epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grad();
            let (mut cls, mut reg) = (0.0, 0.0);
            let mut items = Vec::with_capacity(batch.len());
            let inv = T::lit(1.0 / batch.len() as f64);
            for &vi in batch {
                let video = &data.videos[vi];
                let crop = opts
                    .augment
                    .apply(&*video.source(), &video.gts(), cfg.window, &mut aug_rng)?;
                items.push(BatchItem {
                    video: video.annotation.id.clone(),
                    start: crop.start,
                    num_gts: crop.clip.gts.len(),
                });
                let gts: Vec<(Segment<T>, usize)> = crop.clip.gts.iter().map(|(s, c)| (s.cast(), *c)).collect();
                let assignment = assign(&anchors, &gts, opts.anchors);
                let trace = forward_clip(model, &crop.clip.data)?;
                let mut out = detection_loss(&trace.outputs(), &anchors, &assignment, &gts, k, opts.loss)?;
                cls += out.cls.as_f64();
                reg += out.reg.as_f64();
                scale_grads(&mut out.grads, inv);
                model.backward(&trace, &out.grads)?;
            }
            let n = batch.len() as f64;
            let (cls, reg) = (cls / n, reg / n);
            if !(cls.is_finite() && reg.is_finite()) {
                let err = TrainError::NonFiniteLoss {
                    iter,
                    epoch,
                    cls,
                    reg,
                    batch: items,
                };
                if let (Some(dir), TrainError::NonFiniteLoss { batch, .. }) = (opts.out_dir, &err) {
                    let dump = serde_json::to_vec_pretty(batch).unwrap_or_default();
                    let _ = std::fs::create_dir_all(dir);
                    let _ = write_atomic(&dir.join("last_batch.json"), &dump);
                }
                return Err(err);
            }
            let lr = lr_at(iter, iters_per_epoch, cfg);
            sgd.step(model, lr, cfg)?;
            log.push(LogRow {
                iter,
                epoch,
                lr,
                cls_loss: cls,
                reg_loss: reg,
                total: cls + reg,
            });
            iter += 1;
        }
        if let Some(dir) = opts.out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                checkpoints.push(save_progress(
                    model,
                    &log,
                    dir,
                    &format!("epoch_{:04}.tadw", epoch + 1),
                )?);
            }
        }
    }
    if let Some(dir) = opts.out_dir {
        checkpoints.push(save_progress(model, &log, dir, "final.tadw")?);
    }
    Ok(FitSummary { log, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::net::NetConfig;
    use crate::synth::{synth_dataset, SynthSpec};

    #[test]
    fn schedule_fixed_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 10, &cfg), 0.001);
        assert_eq!(lr_at(500, 10, &cfg), 0.01);
        // 100 epochs x 10 iterations: the last iteration of a cycle is the floor
        assert_eq!(lr_at(500 + 999, 10, &cfg), 0.0001);
        assert_eq!(lr_at(500 + 1000, 10, &cfg), 0.01);
        let odd = TrainConfig {
            warmup_iters: 0,
            cycle_epochs: 1,
            ..Default::default()
        };
        // 11 iterations per cycle: iteration 5 is the midpoint
        assert!((lr_at(5, 11, &odd) - 0.00505).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_monotone_within_cycles() {
        let cfg = TrainConfig {
            warmup_iters: 20,
            cycle_epochs: 3,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..200).map(|i| lr_at(i, 7, &cfg)).collect();
        for i in 1..200 {
            let restart = i >= 20 && (i - 20) % 21 == 0;
            if i > 20 && !restart {
                assert!(lrs[i] <= lrs[i - 1], "iteration {i}");
            }
            if i <= 20 {
                assert!(lrs[i] >= lrs[i - 1]);
            }
        }
    }

    fn param(values: &[f64], grads: &[f64]) -> Param<f64> {
        let mut p = Param::new("w", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap());
        p.grad = Tensor::from_vec(&[grads.len()], grads.to_vec()).unwrap();
        p
    }

    #[test]
    fn sgd_examples() {
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        let mut v = Tensor::zeros(&[2]);
        sgd_update(&mut p, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);

        let mut p = param(&[1.0], &[0.5]);
        let mut v = Tensor::zeros(&[1]);
        sgd_update(&mut p, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.value.data(), &[1.0 - 0.1 * 0.5]);
        sgd_update(&mut p, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p.value.data()[0] - (1.0 - 0.1 * (0.5 + 1.9 * 0.5))).abs() < 1e-15);

        let mut frozen = param(&[3.0], &[1.0]);
        frozen.frozen = true;
        sgd_update(&mut frozen, &mut Tensor::zeros(&[1]), 0.1, 0.9, 0.1).unwrap();
        assert_eq!(frozen.value.data(), &[3.0]);

        let mut bad = param(&[3.0], &[f64::NAN]);
        assert!(matches!(
            sgd_update(&mut bad, &mut Tensor::zeros(&[1]), 0.1, 0.9, 0.0),
            Err(TrainError::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn half_steps_on_a_quadratic() {
        // f(x) = a x^2 / 2: one step of lr gives x(1 - a lr), two of lr/2 give x(1 - a lr/2)^2
        let (a, lr, x0) = (3.0, 0.1, 2.0);
        let step = |x: f64, lr: f64| {
            let mut p = param(&[x], &[a * x]);
            sgd_update(&mut p, &mut Tensor::zeros(&[1]), lr, 0.0, 0.0).unwrap();
            p.value.data()[0]
        };
        let full = step(x0, lr);
        let half = step(step(x0, lr / 2.0), lr / 2.0);
        assert!((half - full - x0 * (a * lr / 2.0).powi(2)).abs() < 1e-12);
    }

    fn tiny() -> (Dataset, NetConfig, TrainConfig) {
        let spec = SynthSpec {
            num_train: 3,
            num_test: 0,
            channels: 8,
            ..Default::default()
        };
        let data = Dataset::from_synth(&synth_dataset(&spec).unwrap(), Split::Train);
        let net = NetConfig {
            backbone_channels: 8,
            tdm_channels: 8,
            fpn_channels: 8,
            head_convs: 1,
            ..Default::default()
        };
        let train = TrainConfig {
            total_epochs: 2,
            batch_size: 2,
            warmup_iters: 2,
            cycle_epochs: 1,
            seed: 3,
            ..Default::default()
        };
        (data, net, train)
    }

    fn run(data: &Dataset, net: &NetConfig, train: &TrainConfig, dir: Option<&Path>) -> (Detector<f32>, FitSummary) {
        let mut model = Detector::<f32>::new(net, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let opts = FitOptions {
            train,
            anchors: &AnchorConfig::default(),
            loss: &LossConfig::default(),
            augment: &AugmentPolicy::none(),
            out_dir: dir,
        };
        let s = fit(data, &mut model, &opts).unwrap();
        (model, s)
    }

    #[test]
    fn zero_epochs_leave_the_model_alone() {
        let (data, net, mut train) = tiny();
        train.total_epochs = 0;
        let (model, s) = run(&data, &net, &train, None);
        assert!(s.log.is_empty());
        assert_eq!(
            model,
            Detector::<f32>::new(&net, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
        );
    }

    #[test]
    fn deterministic_logs_and_frozen_projection() {
        let (data, mut net, train) = tiny();
        let (_, a) = run(&data, &net, &train, None);
        let (_, b) = run(&data, &net, &train, None);
        assert_eq!(a.log.len(), 4);
        assert_eq!(a, b);

        // pixel-free feature training never touches the projection; freezing
        // is checked on a pixel set
        net.frozen = true;
        let spec = SynthSpec {
            num_train: 2,
            num_test: 0,
            ..SynthSpec::pixel_default()
        };
        let pix = Dataset::from_synth(&synth_dataset(&spec).unwrap(), Split::Train);
        net.backbone_channels = 8;
        let train = TrainConfig {
            window: 128,
            total_epochs: 1,
            ..train
        };
        let before = Detector::<f32>::new(&net, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut model = before.clone();
        let policy = AugmentPolicy {
            crop_size: (48, 48),
            ..Default::default()
        };
        fit(
            &pix,
            &mut model,
            &FitOptions {
                train: &train,
                anchors: &AnchorConfig::default(),
                loss: &LossConfig::default(),
                augment: &policy,
                out_dir: None,
            },
        )
        .unwrap();
        assert_eq!(model.projection, before.projection);
        assert_ne!(model.head, before.head);
    }

    #[test]
    fn writes_metrics_and_checkpoints() {
        let (data, net, mut train) = tiny();
        train.checkpoint_every = 1;
        let dir = tempfile::tempdir().unwrap();
        let (model, s) = run(&data, &net, &train, Some(dir.path()));
        assert_eq!(s.checkpoints.len(), 3);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("iter,epoch,lr,cls_loss,reg_loss,total\n"));
        assert_eq!(csv.lines().count(), 5);
        let ck = crate::io::Checkpoint::load(&dir.path().join("final.tadw")).unwrap();
        assert_eq!(ck, model.to_checkpoint());
    }
}
