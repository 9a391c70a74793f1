//! Named-tensor archive.
//!
//! ```text
//! "LMCK" | version u32 | count u32
//! per tensor: name_len u32 | name utf-8 | ndim u32 | dims u64 * ndim | f32 * len
//! ```
//! All integers and floats little-endian.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::Tensor;
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"LMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let name = name.into();
        let t = t.cast::<f32>();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fetches `name` as `T`, checking its shape.
    pub fn load<T: Real>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>, CheckpointError> {
        let t = self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if t.shape() != shape {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t.cast())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * t.len());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = read_u32(&mut r)?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > 1 << 16 {
                return Err(CheckpointError::Corrupt(format!("name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("name not utf-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Corrupt(format!("`{name}` has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(truncated)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= 1 << 30)
                .ok_or_else(|| CheckpointError::Corrupt(format!("`{name}` shape {shape:?}")))?;
            let mut raw = vec![0u8; 4 * n];
            r.read_exact(&mut raw).map_err(truncated)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push((name, Tensor::new(&shape, data).expect("shape product checked")));
        }
        Ok(Archive { entries })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        self.write(io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn open(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::read(io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn truncated(e: io::Error) -> CheckpointError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        CheckpointError::Corrupt("truncated".into())
    } else {
        CheckpointError::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let mut a = Archive::new();
        a.insert("w", &Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5));
        a.insert("s", &Tensor::<f32>::scalar(7.0));
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        let b = Archive::read(&buf[..]).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.load::<f64>("w", &[2, 3]).unwrap().data()[5], 2.5);
        assert!(matches!(b.load::<f64>("w", &[3, 2]), Err(CheckpointError::Shape { .. })));
        assert!(matches!(b.load::<f64>("x", &[1]), Err(CheckpointError::Missing(_))));
        assert!(matches!(Archive::read(&buf[..buf.len() - 1]), Err(CheckpointError::Corrupt(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::read(&bad[..]), Err(CheckpointError::BadMagic)));
        bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(Archive::read(&bad[..]), Err(CheckpointError::Version(9))));
    }
}
