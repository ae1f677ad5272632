//! Dataset directories: `train.json` / `test.json` annotations plus one
//! `features/<id>.tadf` or `frames/<id>.tadv` file per video.

use std::path::{Path, PathBuf};

use crate::augment::{FrameSource, GroundTruth, TemporalSource, FEATURE_STRIDE};
use crate::inference::VideoInput;
use crate::io::{AnnotationFile, FeatureFile, IoError, VideoAnnotation, VideoFrames};
use crate::net::Tensor;
use crate::synth::{SynthDataset, SynthVideo};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.json",
            Split::Test => "test.json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VideoContent {
    Features(Tensor<f32>),
    Frames(VideoFrames),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub annotation: VideoAnnotation,
    pub content: VideoContent,
}

impl VideoRecord {
    pub fn gts(&self) -> Vec<GroundTruth> {
        self.annotation.gts()
    }

    pub fn source(&self) -> Box<dyn TemporalSource + '_> {
        match &self.content {
            VideoContent::Features(f) => Box::new(f),
            VideoContent::Frames(v) => Box::new(FrameSource {
                frames: v,
                fps: self.annotation.fps,
            }),
        }
    }

    pub fn input(&self) -> VideoInput<'_> {
        match &self.content {
            VideoContent::Features(f) => VideoInput::Features(f),
            VideoContent::Frames(v) => VideoInput::Frames {
                frames: v,
                fps: self.annotation.fps,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub videos: Vec<VideoRecord>,
}

pub fn features_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("features").join(format!("{id}.tadf"))
}

pub fn frames_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("frames").join(format!("{id}.tadv"))
}

fn check_content(path: &Path, ann: &VideoAnnotation, content: &VideoContent) -> Result<(), IoError> {
    let ok = match content {
        VideoContent::Features(f) => f.dim(1) == ann.num_frames.div_ceil(FEATURE_STRIDE),
        VideoContent::Frames(v) => v.frames == ann.num_frames && v.channels == 3,
    };
    if ok {
        Ok(())
    } else {
        Err(IoError::invalid(
            path,
            format!("content does not match {} annotated frames", ann.num_frames),
        ))
    }
}

impl Dataset {
    /// Loads one split, preferring feature files over raw frames per video.
    pub fn load(dir: &Path, split: Split) -> Result<Self, IoError> {
        let ann = AnnotationFile::load(&dir.join(split.file_name()))?;
        Self::load_with(dir, &ann)
    }

    /// Loads the content of every video listed in `ann` from `dir`.
    pub fn load_with(dir: &Path, ann: &AnnotationFile) -> Result<Self, IoError> {
        let mut videos = Vec::with_capacity(ann.videos.len());
        for v in &ann.videos {
            let fpath = features_path(dir, &v.id);
            let (path, content) = if fpath.exists() {
                let f = FeatureFile::load(&fpath)?;
                let t = Tensor::from_vec(&[f.channels, f.positions], f.data)
                    .map_err(|e| IoError::invalid(&fpath, e.to_string()))?;
                (fpath, VideoContent::Features(t))
            } else {
                let p = frames_path(dir, &v.id);
                let frames = VideoFrames::load(&p)?;
                (p, VideoContent::Frames(frames))
            };
            check_content(&path, v, &content)?;
            videos.push(VideoRecord {
                annotation: v.clone(),
                content,
            });
        }
        Ok(Self {
            num_classes: ann.num_classes,
            videos,
        })
    }

    pub fn annotations(&self) -> AnnotationFile {
        AnnotationFile {
            videos: self.videos.iter().map(|v| v.annotation.clone()).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn from_synth(ds: &SynthDataset, split: Split) -> Self {
        let ann = match split {
            Split::Train => &ds.train,
            Split::Test => &ds.test,
        };
        let videos = ann
            .videos
            .iter()
            .map(|a| {
                let (_, content) = ds
                    .videos
                    .iter()
                    .find(|(id, _)| *id == a.id)
                    .expect("synth video for every id");
                VideoRecord {
                    annotation: a.clone(),
                    content: match content {
                        SynthVideo::Features(f) => VideoContent::Features(
                            Tensor::from_vec(&[f.channels, f.positions], f.data.clone()).expect("consistent size"),
                        ),
                        SynthVideo::Frames(v) => VideoContent::Frames(v.clone()),
                    },
                }
            })
            .collect();
        Self {
            num_classes: ann.num_classes,
            videos,
        }
    }
}

/// Writes both splits and every video file under `dir`.
pub fn save_synth(ds: &SynthDataset, dir: &Path) -> Result<(), IoError> {
    for sub in ["features", "frames"] {
        let p = dir.join(sub);
        if ds.videos.iter().any(|(_, v)| {
            matches!(
                (sub, v),
                ("features", SynthVideo::Features(_)) | ("frames", SynthVideo::Frames(_))
            )
        }) {
            std::fs::create_dir_all(&p).map_err(|e| IoError::fs(&p, e))?;
        }
    }
    for (id, v) in &ds.videos {
        match v {
            SynthVideo::Features(f) => f.save(&features_path(dir, id))?,
            SynthVideo::Frames(f) => f.save(&frames_path(dir, id))?,
        }
    }
    ds.train.save(&dir.join(Split::Train.file_name()))?;
    ds.test.save(&dir.join(Split::Test.file_name()))?;
    Ok(())
}
