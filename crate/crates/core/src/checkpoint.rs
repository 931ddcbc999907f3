//! Binary checkpoint: flat parameters, the cell's config hash and the RNG
//! stream positions at the end of training.
//!
//! Layout (little-endian): `b"QPCK"`, `u32` version, 32-byte config hash,
//! `u64` parameter count, that many `f64`, `u32` RNG count, then per RNG a
//! 32-byte seed, `u64` stream and `u128` word position.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ppo::RngState;

const MAGIC: &[u8; 4] = b"QPCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub params: Vec<f64>,
    pub rng_states: Vec<RngState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.params.len() * 8 + self.rng_states.len() * 56);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&(self.rng_states.len() as u32).to_le_bytes());
        for r in &self.rng_states {
            out.extend_from_slice(&r.seed);
            out.extend_from_slice(&r.stream.to_le_bytes());
            out.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::config(format!("malformed checkpoint: {what}"));
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            bytes.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
            Ok(buf)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = take(32)?.try_into().unwrap();
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let params = take(n.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let k = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut rng_states = Vec::with_capacity(k);
        for _ in 0..k {
            let seed: [u8; 32] = take(32)?.try_into().unwrap();
            let stream = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let word_pos = u128::from_le_bytes(take(16)?.try_into().unwrap());
            rng_states.push(RngState { seed, stream, word_pos });
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config_hash, params, rng_states })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let ck = Checkpoint {
            config_hash: [7; 32],
            params: vec![1.5, -0.25, f64::MIN_POSITIVE],
            rng_states: vec![RngState { seed: [3; 32], stream: 9, word_pos: 1 << 70 }],
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
