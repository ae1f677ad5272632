use std::path::Path;

use super::{read_bytes, write_atomic, IoError, Reader};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TADW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parameter blocks, each `name_len u16, name, rank u8, dims u32 x rank,
/// f32 data`, following the magic and version. Blocks run to end of file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader::new(path, bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let mut tensors = Vec::new();
        while r.remaining() > 0 {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| IoError::invalid(path, "parameter name is not UTF-8"))?;
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let data = r.f32s(dims.iter().product())?;
            tensors.push(NamedTensor { name, dims, data });
        }
        Ok(Self { tensors })
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

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                NamedTensor {
                    name: "tdm.0.weight".into(),
                    dims: vec![2, 1, 3],
                    data: vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, 4.0, -7.25],
                },
                NamedTensor {
                    name: "tdm.0.bias".into(),
                    dims: vec![2],
                    data: vec![0.1, 0.2],
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(Path::new("c"), &bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("tdm.0.bias").unwrap().data, vec![0.1, 0.2]);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 9, 10] {
            assert!(matches!(
                Checkpoint::from_bytes(Path::new("c"), &bytes[..cut]),
                Err(IoError::Truncated { .. })
            ));
        }
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"TADF");
        assert!(matches!(
            Checkpoint::from_bytes(Path::new("c"), &bad),
            Err(IoError::BadMagic { .. })
        ));
    }
}
