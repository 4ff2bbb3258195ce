//! Frozen reference outputs for the transfer kernels.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic      8 bytes "CMFTGOLD"
//! version    u32
//! height     u32
//! width      u32
//! l_match    u32
//! l_payload  u32
//! seed       u64
//! tolerance  f64
//! query, key, payload, expected   f64 arrays, position-major
//! ```

use std::fs;
use std::path::Path;

use crate::cmft::FeatureMap;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CMFTGOLD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenCase {
    pub seed: u64,
    pub tolerance: f64,
    pub query: FeatureMap,
    pub key: FeatureMap,
    pub payload: FeatureMap,
    pub expected: FeatureMap,
}

impl GoldenCase {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            self.query.height(),
            self.query.width(),
            self.query.channels(),
            self.payload.channels(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.tolerance.to_le_bytes());
        for m in [&self.query, &self.key, &self.payload, &self.expected] {
            for v in m.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Validation(format!("golden file: {m}"));
        if bytes.len() < 44 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let version = u32_at(8);
        if version != VERSION as usize {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let (h, w, lm, lp) = (u32_at(12), u32_at(16), u32_at(20), u32_at(24));
        let seed = u64::from_le_bytes(bytes[28..36].try_into().expect("8 bytes"));
        let tolerance = f64::from_le_bytes(bytes[36..44].try_into().expect("8 bytes"));
        let n = h * w;
        let sizes = [n * lm, n * lm, n * lp, n * lp];
        if bytes.len() != 44 + 8 * sizes.iter().sum::<usize>() {
            return Err(bad("length does not match header"));
        }
        let mut offset = 44;
        let mut take = |count: usize| {
            let v: Vec<f64> = bytes[offset..offset + 8 * count]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * count;
            v
        };
        let query = FeatureMap::new(h, w, lm, take(sizes[0]))?;
        let key = FeatureMap::new(h, w, lm, take(sizes[1]))?;
        let payload = FeatureMap::new(h, w, lp, take(sizes[2]))?;
        let expected = FeatureMap::new(h, w, lp, take(sizes[3]))?;
        Ok(Self {
            seed,
            tolerance,
            query,
            key,
            payload,
            expected,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let m = |l: usize, s: f64| FeatureMap::from_fn(2, 3, l, |y, x, c| s * (y * 7 + x * 3 + c) as f64).unwrap();
        let case = GoldenCase {
            seed: 9,
            tolerance: 1e-5,
            query: m(2, 0.1),
            key: m(2, -0.2),
            payload: m(1, 1.0),
            expected: m(1, 0.5),
        };
        let bytes = case.to_bytes();
        assert_eq!(GoldenCase::from_bytes(&bytes).unwrap(), case);
        assert!(GoldenCase::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
