//! On-disk formats: JSON annotations, binary feature sequences, raw frame
//! tensors and model checkpoints.

pub mod annotations;
pub mod checkpoint;
pub mod detections;
pub mod features;
pub mod frames;

pub use annotations::{AnnotationFile, Instance, VideoAnnotation};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use detections::{Detection, DetectionFile};
pub use features::FeatureFile;
pub use frames::VideoFrames;

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: Vec<u8>,
    },
    #[error("{path}: unsupported version {found}, expected {expected}")]
    Version { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("{path}: malformed JSON at line {line}, column {column}: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl IoError {
    pub(crate) fn fs(path: &Path, source: std::io::Error) -> Self {
        Self::Fs {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn invalid(path: &Path, message: impl Into<String>) -> Self {
        Self::Invalid {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::fs(path, e))?;
    tmp.write_all(bytes).map_err(|e| IoError::fs(path, e))?;
    tmp.as_file().sync_all().map_err(|e| IoError::fs(path, e))?;
    tmp.persist(path).map_err(|e| IoError::fs(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| IoError::fs(path, e))
}

/// Little-endian cursor that reports truncation with offsets.
pub(crate) struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.remaining() < n {
            return Err(IoError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.pos,
                expected: n,
                actual: self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<(), IoError> {
        let found = &self.bytes[..self.bytes.len().min(4)];
        if found != expected {
            return Err(IoError::BadMagic {
                path: self.path.to_path_buf(),
                expected,
                found: found.to_vec(),
            });
        }
        self.pos = 4;
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<(), IoError> {
        let found = self.u32()?;
        if found != expected {
            return Err(IoError::Version {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, IoError> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<(), IoError> {
        match self.remaining() {
            0 => Ok(()),
            extra => Err(IoError::TrailingBytes {
                path: self.path.to_path_buf(),
                extra,
            }),
        }
    }
}
