use std::path::Path;

use super::{read_bytes, write_atomic, IoError, Reader};

pub const FRAMES_MAGIC: [u8; 4] = *b"TADV";
pub const FRAMES_VERSION: u32 = 1;

/// Raw 8-bit video laid out `(channels, frames, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrames {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl VideoFrames {
    pub fn zeros(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            frames,
            height,
            width,
            data: vec![0; channels * frames * height * width],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, h: usize, w: usize) -> usize {
        ((c * self.frames + t) * self.height + h) * self.width + w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len());
        out.extend_from_slice(&FRAMES_MAGIC);
        out.extend_from_slice(&FRAMES_VERSION.to_le_bytes());
        for d in [self.channels, self.frames, self.height, self.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader::new(path, bytes);
        r.magic(FRAMES_MAGIC)?;
        r.version(FRAMES_VERSION)?;
        let channels = r.u32()? as usize;
        let frames = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let data = r.take(channels * frames * height * width)?.to_vec();
        r.finish()?;
        Ok(Self {
            channels,
            frames,
            height,
            width,
            data,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_bytes(path, &read_bytes(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_atomic(path, &self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let mut v = VideoFrames::zeros(3, 2, 4, 5);
        for (i, p) in v.data.iter_mut().enumerate() {
            *p = (i * 7 % 256) as u8;
        }
        let bytes = v.to_bytes();
        assert_eq!(VideoFrames::from_bytes(Path::new("v"), &bytes).unwrap(), v);
        assert!(matches!(
            VideoFrames::from_bytes(Path::new("v"), &bytes[..bytes.len() - 1]),
            Err(IoError::Truncated { .. })
        ));
    }
}
