//! Raw tensor files: the ASCII magic `SSDA`, then little-endian `u32`
//! count, height and width, then `count` row-major `f32` grids.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SSDA";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(count: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != count * height * width {
            return Err(Error::Dimension(format!(
                "{} values for {count} grids of {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { count, height, width, data })
    }

    pub fn grid(&self, index: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[index * n..(index + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [self.count, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "missing SSDA header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (count, height, width) = (word(0), word(1), word(2));
        let expected = count
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != expected {
            return Err(Error::format(
                path,
                format!("expected {expected} payload bytes for {count}x{height}x{width}, found {}", body.len()),
            ));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { count, height, width, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let t = RawTensor::new(2, 1, 3, vec![1.0, 2.0, 3.0, -4.0, 0.5, 6.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"SSDA");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(RawTensor::from_bytes(&bytes, Path::new("x")).unwrap(), t);
        assert_eq!(t.grid(1), &[-4.0, 0.5, 6.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RawTensor::new(1, 2, 2, vec![0.0; 3]).is_err());
        let t = RawTensor::new(1, 1, 2, vec![0.0; 2]).unwrap();
        let mut bytes = t.to_bytes();
        bytes.pop();
        assert!(matches!(RawTensor::from_bytes(&bytes, Path::new("x")), Err(Error::Format { .. })));
        assert!(RawTensor::from_bytes(b"PNG!aaaaaaaaaaaa", Path::new("x")).is_err());
    }
}
