//! Tensor container: `"UPG1"`, little-endian `u32` rank, `u32` dims, `u32`
//! dtype code (0 = f32), then row-major little-endian data.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UPG1";
pub const DTYPE_F32: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(&dims, &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Container {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut words = bytes.get(4..).unwrap_or_default().chunks_exact(4);
        let mut next = || -> Result<u32> {
            words
                .next()
                .map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]]))
                .ok_or_else(|| bad("truncated header"))
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let rank = next()? as usize;
        let dims = (0..rank)
            .map(|_| next().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = next()?;
        if dtype != DTYPE_F32 {
            return Err(bad(&format!("unsupported dtype code {dtype}")));
        }
        let header = 4 * (3 + rank);
        let expected = dims
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("dimension product overflows"))?;
        let body = &bytes[header..];
        if body.len() != expected {
            return Err(bad(&format!("expected {expected} data bytes, found {}", body.len())));
        }
        let data = body
            .chunks_exact(4)
            .map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Writes the tensor plus a `.json` sidecar describing it.
    pub fn write_with_sidecar(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        self.write(path)?;
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(meta)?;
        fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn from_map(map: &Array2<f64>) -> Self {
        let (h, w) = map.dim();
        Self {
            dims: vec![h, w],
            data: map.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Interprets a rank-2 tensor (or rank-3 with a leading unit axis) as a map.
    pub fn to_map(&self, path: &Path) -> Result<Array2<f64>> {
        let (h, w) = match self.dims.as_slice() {
            [h, w] | [1, h, w] => (*h, *w),
            _ => {
                return Err(Error::Container {
                    path: path.to_path_buf(),
                    reason: format!("expected a 2-D map, found dims {:?}", self.dims),
                })
            }
        };
        let data = self.data.iter().map(|&v| v as f64).collect();
        Ok(Array2::from_shape_vec((h, w), data).expect("dims checked on decode"))
    }
}

/// `x.upg` → `x.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = TensorFile::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, -1.5]).unwrap();
        let b = t.encode();
        assert_eq!(&b[..4], b"UPG1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &3u32.to_le_bytes());
        assert_eq!(&b[16..20], &0u32.to_le_bytes());
        assert_eq!(&b[20..24], &0f32.to_le_bytes());
        assert_eq!(&b[40..44], &(-1.5f32).to_le_bytes());
        assert_eq!(b.len(), 20 + 24);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let p = Path::new("x.upg");
        assert!(TensorFile::decode(b"UPG2\0\0\0\0", p).is_err());
        assert!(TensorFile::decode(b"UPG1\x01\0\0\0", p).is_err());
        let mut b = TensorFile::new(vec![2], vec![1.0, 2.0]).unwrap().encode();
        b.pop();
        assert!(TensorFile::decode(&b, p).is_err());
        let mut b = TensorFile::new(vec![1], vec![1.0]).unwrap().encode();
        b[12] = 7;
        assert!(TensorFile::decode(&b, p).is_err());
        assert!(TensorFile::new(vec![3], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = TensorFile::new(dims, data).unwrap();
            let back = TensorFile::decode(&t.encode(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
