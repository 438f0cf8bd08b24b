//! Self-describing binary tensor file.
//!
//! Layout, all little-endian: the magic `KPNT`, a `u16` version, a `u16`
//! rank, `rank` dimensions as `u32`, the row-major `f32` payload, and a
//! `u32` CRC32 of the payload bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KPNT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorContainer {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl TensorContainer {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        if expected != Some(data.len()) {
            return Err(Error::shape(format!("tensor dims {dims:?} do not match {} values", data.len())));
        }
        if dims.len() > u16::MAX as usize {
            return Err(Error::shape("tensor rank too large"));
        }
        Ok(Self { dims, data })
    }

    /// Narrows `f64` values to `f32`.
    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        let dims = dims
            .iter()
            .map(|&d| u32::try_from(d).map_err(|_| Error::shape(format!("dimension {d} exceeds u32"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u16).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        let start = out.len();
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::io("not a tensor container (bad magic)"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::io(format!("unsupported container version {version}")));
        }
        let rank = u16::from_le_bytes(r.array()?) as usize;
        let dims = (0..rank).map(|_| r.array().map(u32::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::io("container dimensions overflow"))?;
        let payload = r.take(count)?;
        let crc = u32::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(Error::io(format!("{} trailing bytes after container", bytes.len() - r.pos)));
        }
        if crc32fast::hash(payload) != crc {
            return Err(Error::io("container CRC mismatch"));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| Error::io(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::io("truncated tensor container"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn size_of_rank3_kernel_container() {
        let t = TensorContainer::new(vec![25, 4, 4], vec![0.5; 400]).unwrap();
        let bytes = t.to_bytes();
        // 4 magic + 2 version + 2 rank + 3 * 4 dims + 1600 payload + 4 crc
        assert_eq!(bytes.len(), 4 + 2 + 2 + 12 + 1600 + 4);
        assert_eq!(&bytes[..4], b"KPNT");
        assert_eq!(&bytes[4..8], &[1, 0, 3, 0]);
        assert_eq!(&bytes[8..12], &25u32.to_le_bytes());
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let t = TensorContainer::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let bytes = t.to_bytes();
        for cut in [0, 3, 7, 10, bytes.len() - 1] {
            assert!(matches!(TensorContainer::from_bytes(&bytes[..cut]), Err(Error::Io(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(TensorContainer::from_bytes(&bad), Err(Error::Io(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(TensorContainer::from_bytes(&magic).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(TensorContainer::from_bytes(&extra).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(TensorContainer::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert_eq!(TensorContainer::new(vec![], vec![1.0]).unwrap().to_bytes().len(), 4 + 2 + 2 + 4 + 4);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kpnt");
        let t = TensorContainer::from_f64(&[3, 1], &[1.5, -2.25, 1e-3]).unwrap();
        t.write(&path).unwrap();
        assert_eq!(TensorContainer::read(&path).unwrap(), t);
        assert!(TensorContainer::read(&dir.path().join("missing")).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_byte_identical(dims in prop::collection::vec(1u32..5, 0..4), seed in any::<u32>()) {
            let n: u32 = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i * 7919) & 0x7f7f_ffff)).collect();
            let t = TensorContainer::new(dims, data).unwrap();
            let bytes = t.to_bytes();
            let back = TensorContainer::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
