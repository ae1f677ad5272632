//! Synthetic untrimmed videos with known action instances.
//!
//! Feature mode writes `(C, T/8)` sequences of unit-variance noise in which
//! an instance of class `k` lifts channel `k mod C` by `snr`, ramping in and
//! out over two positions. Pixel mode writes raw frames in which an instance
//! is a bright square sliding across the frame and blinking with a
//! class-specific period.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::ScaleBucket;
use crate::augment::FEATURE_STRIDE;
use crate::io::{AnnotationFile, FeatureFile, Instance, VideoAnnotation, VideoFrames};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Config(String),
    #[error("video {video}: {needed} frames of instances and gaps do not fit in {available}")]
    Packing {
        video: String,
        needed: usize,
        available: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    #[default]
    Feature,
    Pixel,
}

/// Instance lengths in frames drawn uniformly from `[min, max]`, bucket chosen by weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub min: usize,
    pub max: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PixelSpec {
    pub height: usize,
    pub width: usize,
    pub square: usize,
    /// Blink period in frames for each class, cycled when there are more classes.
    pub blink_periods: Vec<usize>,
    pub background: u8,
    /// Per-pixel uniform noise amplitude.
    pub noise: u8,
    pub color: [u8; 3],
    /// Held-out videos get random trajectories, colour permutations and brightness.
    pub test_jitter: bool,
}

impl Default for PixelSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            square: 16,
            blink_periods: vec![16, 32, 64],
            background: 64,
            noise: 16,
            color: [230, 90, 60],
            test_jitter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub mode: SynthMode,
    pub num_train: usize,
    pub num_test: usize,
    pub num_classes: usize,
    /// Inclusive frame range, rounded down to a multiple of 8.
    pub video_len: (usize, usize),
    pub instances_per_video: (usize, usize),
    pub lengths: Vec<LengthBucket>,
    /// Minimum background frames between instances and at the video ends.
    pub min_gap: usize,
    pub snr: f64,
    pub channels: usize,
    pub fps: f64,
    pub pixel: PixelSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            mode: SynthMode::Feature,
            num_train: 32,
            num_test: 8,
            num_classes: 3,
            video_len: (1024, 1536),
            instances_per_video: (1, 3),
            lengths: vec![
                LengthBucket {
                    min: 24,
                    max: 75,
                    weight: 0.4,
                },
                LengthBucket {
                    min: 76,
                    max: 180,
                    weight: 0.35,
                },
                LengthBucket {
                    min: 181,
                    max: 288,
                    weight: 0.25,
                },
            ],
            min_gap: 16,
            snr: 4.0,
            channels: 64,
            fps: 30.0,
            pixel: PixelSpec::default(),
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// A small pixel-mode set sized for a 128-frame training window.
    pub fn pixel_default() -> Self {
        Self {
            mode: SynthMode::Pixel,
            num_train: 24,
            num_test: 8,
            video_len: (256, 384),
            instances_per_video: (1, 2),
            lengths: vec![
                LengthBucket {
                    min: 24,
                    max: 48,
                    weight: 0.5,
                },
                LengthBucket {
                    min: 49,
                    max: 96,
                    weight: 0.5,
                },
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.num_classes == 0 {
            return err("num_classes must be at least 1".into());
        }
        if self.num_train + self.num_test == 0 {
            return err("no videos requested".into());
        }
        if self.video_len.0 < FEATURE_STRIDE || self.video_len.0 > self.video_len.1 {
            return err(format!(
                "video_len {:?} must be ordered and at least {FEATURE_STRIDE}",
                self.video_len
            ));
        }
        if self.instances_per_video.0 > self.instances_per_video.1 {
            return err("instances_per_video must be ordered".into());
        }
        if self.lengths.is_empty()
            || self
                .lengths
                .iter()
                .any(|b| b.min == 0 || b.min > b.max || !(b.weight > 0.0))
        {
            return err("length buckets need 0 < min <= max and positive weight".into());
        }
        if !(self.snr.is_finite() && self.snr >= 0.0) {
            return err(format!("snr must be non-negative, got {}", self.snr));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return err(format!("fps must be positive, got {}", self.fps));
        }
        match self.mode {
            SynthMode::Feature if self.channels == 0 => return err("channels must be positive".into()),
            SynthMode::Pixel => {
                let p = &self.pixel;
                if p.square == 0 || p.square > p.height.min(p.width) {
                    return err("square must fit in the frame".into());
                }
                if p.blink_periods.is_empty() || p.blink_periods.iter().any(|&b| b < 2) {
                    return err("blink periods must be at least 2 frames".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthVideo {
    Features(FeatureFile),
    Frames(VideoFrames),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: AnnotationFile,
    pub test: AnnotationFile,
    /// Content for every video of both splits, keyed by id.
    pub videos: Vec<(String, SynthVideo)>,
}

/// Per-video rendering parameters for pixel mode.
#[derive(Debug, Clone, Copy)]
struct Look {
    color: [u8; 3],
    background: f64,
    mirrored: bool,
    row: usize,
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut videos = Vec::new();
    for i in 0..spec.num_train + spec.num_test {
        let held_out = i >= spec.num_train;
        let id = if held_out {
            format!("test_{:03}", i - spec.num_train)
        } else {
            format!("train_{i:03}")
        };
        let ann = draw_annotation(spec, &id, &mut rng)?;
        let content = match spec.mode {
            SynthMode::Feature => SynthVideo::Features(render_features(spec, &ann, &mut rng)),
            SynthMode::Pixel => {
                let look = draw_look(spec, held_out, &mut rng);
                SynthVideo::Frames(render_frames(spec, &ann, look, &mut rng))
            }
        };
        videos.push((id, content));
        if held_out { &mut test } else { &mut train }.push(ann);
    }
    let wrap = |videos| AnnotationFile {
        videos,
        num_classes: spec.num_classes,
    };
    Ok(SynthDataset {
        train: wrap(train),
        test: wrap(test),
        videos,
    })
}

fn draw_annotation<R: Rng>(spec: &SynthSpec, id: &str, rng: &mut R) -> Result<VideoAnnotation, SynthError> {
    let len = rng.random_range(spec.video_len.0..=spec.video_len.1) / FEATURE_STRIDE * FEATURE_STRIDE;
    let count = rng.random_range(spec.instances_per_video.0..=spec.instances_per_video.1);
    let total_weight: f64 = spec.lengths.iter().map(|b| b.weight).sum();
    let lengths: Vec<usize> = (0..count)
        .map(|_| {
            let mut u = rng.random_range(0.0..total_weight);
            let bucket = spec
                .lengths
                .iter()
                .find(|b| {
                    u -= b.weight;
                    u < 0.0
                })
                .unwrap_or(&spec.lengths[spec.lengths.len() - 1]);
            rng.random_range(bucket.min..=bucket.max)
        })
        .collect();
    let needed = lengths.iter().sum::<usize>() + (count + 1) * spec.min_gap;
    if needed > len {
        return Err(SynthError::Packing {
            video: id.to_string(),
            needed,
            available: len,
        });
    }
    // split the slack into count + 1 gaps
    let slack = len - needed;
    let mut cuts: Vec<usize> = (0..count).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut instances = Vec::with_capacity(count);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (&l, &cut) in lengths.iter().zip(&cuts) {
        let start = cursor + spec.min_gap + (cut - prev_cut);
        instances.push(Instance {
            class_id: rng.random_range(0..spec.num_classes),
            start_frame: start as f64,
            end_frame: (start + l) as f64,
        });
        cursor = start + l;
        prev_cut = cut;
    }
    Ok(VideoAnnotation {
        id: id.to_string(),
        num_frames: len,
        fps: spec.fps,
        instances,
    })
}

/// Ramp weight in `[0, 1]` for a point `x` frames from an instance of `[start, end)`.
fn profile(x: f64, start: f64, end: f64) -> f64 {
    let ramp = 2.0 * FEATURE_STRIDE as f64;
    let rise = ((x - start) / ramp + 0.5).clamp(0.0, 1.0);
    let fall = ((end - x) / ramp + 0.5).clamp(0.0, 1.0);
    rise.min(fall)
}

fn render_features<R: Rng>(spec: &SynthSpec, ann: &VideoAnnotation, rng: &mut R) -> FeatureFile {
    let positions = ann.num_frames / FEATURE_STRIDE;
    let c = spec.channels;
    let mut data: Vec<f32> = (0..c * positions).map(|_| StandardNormal.sample(rng)).collect();
    for inst in &ann.instances {
        let ch = inst.class_id % c;
        let row = &mut data[ch * positions..(ch + 1) * positions];
        for (p, v) in row.iter_mut().enumerate() {
            let centre = (p * FEATURE_STRIDE) as f64 + FEATURE_STRIDE as f64 / 2.0;
            *v += (spec.snr * profile(centre, inst.start_frame, inst.end_frame)) as f32;
        }
    }
    FeatureFile::new(c, positions, data)
}

fn draw_look<R: Rng>(spec: &SynthSpec, held_out: bool, rng: &mut R) -> Look {
    let p = &spec.pixel;
    let train = Look {
        color: p.color,
        background: p.background as f64,
        mirrored: false,
        row: (p.height - p.square) / 4,
    };
    if !(held_out && p.test_jitter) {
        return train;
    }
    let mut color = p.color;
    // a random channel order and a brightness change, as a camera would
    for i in (1..3).rev() {
        color.swap(i, rng.random_range(0..=i));
    }
    let gain = rng.random_range(0.75..=1.1);
    Look {
        color: color.map(|v| (v as f64 * gain).min(255.0) as u8),
        background: (p.background as f64 + rng.random_range(-24.0..=24.0)).clamp(0.0, 255.0),
        mirrored: rng.random_bool(0.5),
        row: rng.random_range(0..=p.height - p.square),
    }
}

fn render_frames<R: Rng>(spec: &SynthSpec, ann: &VideoAnnotation, look: Look, rng: &mut R) -> VideoFrames {
    let p = &spec.pixel;
    let mut v = VideoFrames::zeros(3, ann.num_frames, p.height, p.width);
    let noise = p.noise as f64;
    for px in v.data.iter_mut() {
        let n = if noise > 0.0 {
            rng.random_range(-noise..=noise)
        } else {
            0.0
        };
        *px = (look.background + n).round().clamp(0.0, 255.0) as u8;
    }
    for inst in &ann.instances {
        let period = p.blink_periods[inst.class_id % p.blink_periods.len()];
        let (s, e) = (inst.start_frame as usize, inst.end_frame as usize);
        let travel = (p.width - p.square) as f64;
        for t in s..e.min(ann.num_frames) {
            if (t - s) % period >= period / 2 {
                continue;
            }
            let frac = if e - s > 1 {
                (t - s) as f64 / (e - s - 1) as f64
            } else {
                0.0
            };
            let frac = if look.mirrored { 1.0 - frac } else { frac };
            let x0 = (frac * travel).round() as usize;
            for c in 0..3 {
                for y in look.row..look.row + p.square {
                    let i = v.index(c, t, y, x0);
                    v.data[i..i + p.square].fill(look.color[c]);
                }
            }
        }
    }
    v
}

/// Number of instances per Figure-4 scale bucket (small, medium, large).
pub fn bucket_counts(file: &AnnotationFile) -> [usize; 3] {
    let mut counts = [0; 3];
    for v in &file.videos {
        for i in &v.instances {
            let secs = (i.end_frame - i.start_frame) / v.fps;
            counts[ScaleBucket::of_seconds(secs) as usize] += 1;
        }
    }
    counts
}
