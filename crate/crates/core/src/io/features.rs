use std::path::Path;

use super::{read_bytes, write_atomic, IoError, Reader};

pub const FEATURE_MAGIC: [u8; 4] = *b"TADF";
pub const FEATURE_VERSION: u32 = 1;

/// A `(channels, positions)` feature sequence stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub channels: usize,
    pub positions: usize,
    pub data: Vec<f32>,
}

impl FeatureFile {
    pub fn new(channels: usize, positions: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * positions, "feature payload size");
        Self {
            channels,
            positions,
            data,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        4 * self.channels * self.positions
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.payload_bytes());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.positions as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader::new(path, bytes);
        r.magic(FEATURE_MAGIC)?;
        r.version(FEATURE_VERSION)?;
        let channels = r.u32()? as usize;
        let positions = r.u32()? as usize;
        let data = r.f32s(channels * positions)?;
        r.finish()?;
        Ok(Self {
            channels,
            positions,
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
    use proptest::prelude::*;

    #[test]
    fn payload_size() {
        let f = FeatureFile::new(64, 96, vec![0.0; 64 * 96]);
        assert_eq!(f.payload_bytes(), 24576);
        assert_eq!(f.to_bytes().len(), 16 + 24576);
    }

    #[test]
    fn truncation_names_sizes() {
        let f = FeatureFile::new(2, 3, vec![1.0; 6]);
        let mut bytes = f.to_bytes();
        bytes.pop();
        let err = FeatureFile::from_bytes(Path::new("x.tadf"), &bytes).unwrap_err();
        match err {
            IoError::Truncated { expected, actual, .. } => {
                assert_eq!((expected, actual), (24, 23));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = FeatureFile::new(1, 1, vec![1.0]).to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            FeatureFile::from_bytes(Path::new("x"), &bytes),
            Err(IoError::Version { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            FeatureFile::from_bytes(Path::new("x"), &bytes),
            Err(IoError::BadMagic { .. })
        ));
        let mut bytes = FeatureFile::new(1, 1, vec![1.0]).to_bytes();
        bytes.push(0);
        assert!(matches!(
            FeatureFile::from_bytes(Path::new("x"), &bytes),
            Err(IoError::TrailingBytes { extra: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(c in 1usize..5, t in 0usize..20, seed in any::<u32>()) {
            let data: Vec<f32> = (0..c * t)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let f = FeatureFile::new(c, t, data);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("f.tadf");
            f.save(&path).unwrap();
            let back = FeatureFile::load(&path).unwrap();
            prop_assert_eq!(back.to_bytes(), f.to_bytes());
        }
    }
}
