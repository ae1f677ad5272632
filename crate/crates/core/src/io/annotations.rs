use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_atomic, IoError};
use crate::geometry::{GeometryError, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub start_frame: f64,
    pub end_frame: f64,
}

impl Instance {
    pub fn segment(&self) -> Result<Segment<f64>, GeometryError> {
        Segment::new(self.start_frame, self.end_frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub id: String,
    pub num_frames: usize,
    pub fps: f64,
    pub instances: Vec<Instance>,
}

impl VideoAnnotation {
    pub fn gts(&self) -> Vec<(Segment<f64>, usize)> {
        self.instances
            .iter()
            .filter_map(|i| Some((i.segment().ok()?, i.class_id)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub videos: Vec<VideoAnnotation>,
    pub num_classes: usize,
}

impl AnnotationFile {
    /// Checks `0 <= start < end <= num_frames`, `class < num_classes`,
    /// positive fps and unique ids.
    pub fn validate(&self) -> Result<(), String> {
        if self.num_classes == 0 {
            return Err("num_classes must be positive".into());
        }
        let mut ids = std::collections::HashSet::new();
        for (vi, v) in self.videos.iter().enumerate() {
            if !ids.insert(v.id.as_str()) {
                return Err(format!("videos[{vi}]: duplicate id {:?}", v.id));
            }
            if !(v.fps.is_finite() && v.fps > 0.0) {
                return Err(format!("videos[{vi}] ({}): fps must be positive, got {}", v.id, v.fps));
            }
            for (ii, inst) in v.instances.iter().enumerate() {
                let at = format!("videos[{vi}] ({}).instances[{ii}]", v.id);
                if inst.class_id >= self.num_classes {
                    return Err(format!(
                        "{at}: class {} out of range for {} classes",
                        inst.class_id, self.num_classes
                    ));
                }
                let ok = inst.start_frame.is_finite()
                    && inst.end_frame.is_finite()
                    && 0.0 <= inst.start_frame
                    && inst.start_frame < inst.end_frame
                    && inst.end_frame <= v.num_frames as f64;
                if !ok {
                    return Err(format!(
                        "{at}: need 0 <= start < end <= {}, got [{}, {}]",
                        v.num_frames, inst.start_frame, inst.end_frame
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn video(&self, id: &str) -> Option<&VideoAnnotation> {
        self.videos.iter().find(|v| v.id == id)
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
        self.validate().map_err(|m| IoError::invalid(path, m))?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| IoError::invalid(path, e.to_string()))?;
        write_atomic(path, &json)
    }
}
