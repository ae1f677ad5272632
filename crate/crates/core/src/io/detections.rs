use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_atomic, IoError};
use crate::geometry::{GeometryError, ScoredSegment, Segment};

/// A detection in absolute video frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub start_frame: f64,
    pub end_frame: f64,
    pub score: f64,
}

impl Detection {
    pub fn segment(&self) -> Result<Segment<f64>, GeometryError> {
        Segment::new(self.start_frame, self.end_frame)
    }
}

impl From<ScoredSegment<f64>> for Detection {
    fn from(s: ScoredSegment<f64>) -> Self {
        Self {
            class_id: s.class_id,
            start_frame: s.segment.start(),
            end_frame: s.segment.end(),
            score: s.score,
        }
    }
}

/// Detections keyed by video id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DetectionFile {
    pub videos: BTreeMap<String, Vec<Detection>>,
}

impl DetectionFile {
    pub fn validate(&self) -> Result<(), String> {
        for (id, dets) in &self.videos {
            for (i, d) in dets.iter().enumerate() {
                if d.segment().is_err() {
                    return Err(format!(
                        "{id}[{i}]: invalid segment [{}, {}]",
                        d.start_frame, d.end_frame
                    ));
                }
                if !(0.0..=1.0).contains(&d.score) {
                    return Err(format!("{id}[{i}]: score {} outside [0, 1]", d.score));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let bytes = read_bytes(path)?;
        let file: Self = serde_json::from_slice(&bytes).map_err(|e| IoError::Json {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        file.validate().map_err(|m| IoError::invalid(path, m))?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| IoError::invalid(path, e.to_string()))?;
        write_atomic(path, &json)
    }
}
