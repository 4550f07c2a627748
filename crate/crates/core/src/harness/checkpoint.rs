//! Binary checkpoints.
//!
//! Layout, little-endian: magic `DNDETRCK`, format version `u32`, 32-byte
//! config digest, config TOML (`u64` length + UTF-8), tensor count `u32`,
//! then per tensor its name (`u32` length + UTF-8), rows and cols (`u32`)
//! and `rows * cols` `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{io_err, Error, Result};
use crate::harness::config::TrainConfig;
use crate::model::ModelParams;

pub const MAGIC: &[u8; 8] = b"DNDETRCK";
pub const VERSION: u32 = 1;

fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn encode(cfg: &TrainConfig, params: &ModelParams) -> Vec<u8> {
    let text = cfg.to_toml();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash(&text));
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, len: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 text in checkpoint".into()))
    }
}

/// Parses a checkpoint. When `expected` is given its digest must match the
/// stored one.
pub fn decode(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<(TrainConfig, ModelParams)> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "incompatible checkpoint version {version}, this build reads version {VERSION}"
        )));
    }
    let stored: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let len = r.u64()? as usize;
    let text = r.str(len)?;
    if config_hash(text) != stored {
        return Err(Error::Checkpoint("config digest does not match embedded config".into()));
    }
    if let Some(exp) = expected {
        if config_hash(&exp.to_toml()) != stored {
            return Err(Error::Checkpoint("checkpoint was written for a different config".into()));
        }
    }
    let cfg = TrainConfig::from_toml_str(text)?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.str(name_len)?.to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_shape_vec((rows, cols), data).expect("length checked");
        named.push((name, t));
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    let params = ModelParams::from_named(cfg.model(), named)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((cfg, params))
}

pub fn save(path: &Path, cfg: &TrainConfig, params: &ModelParams) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode(cfg, params)).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

pub fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<(TrainConfig, ModelParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (TrainConfig, ModelParams) {
        let cfg = TrainConfig {
            n_classes: 3,
            d_model: 8,
            ffn_dim: 16,
            layers: 2,
            queries: 4,
            grid: 4,
            ..TrainConfig::default()
        };
        let params = ModelParams::init(cfg.model(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (cfg, params)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (cfg, params) = sample();
        let (cfg2, params2) = decode(&encode(&cfg, &params), Some(&cfg)).unwrap();
        assert_eq!(cfg2, cfg);
        for ((n1, t1), (n2, t2)) in params.iter().zip(params2.iter()) {
            assert_eq!(n1, n2);
            assert!(t1.iter().zip(t2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn corrupted_header() {
        let (cfg, params) = sample();
        let mut bytes = encode(&cfg, &params);
        bytes[0] ^= 0xff;
        assert!(matches!(decode(&bytes, None), Err(Error::Checkpoint(m)) if m.contains("magic")));
        assert!(decode(&bytes[..5], None).is_err());
    }

    #[test]
    fn version_bump() {
        let (cfg, params) = sample();
        let mut bytes = encode(&cfg, &params);
        bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(decode(&bytes, None), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn digest_mismatch() {
        let (cfg, params) = sample();
        let bytes = encode(&cfg, &params);
        let other = TrainConfig { seed: 9, ..cfg.clone() };
        assert!(decode(&bytes, Some(&other)).is_err());

        // tampering with the embedded config text breaks the stored digest
        let mut tampered = bytes.clone();
        let pos = tampered.windows(6).position(|w| w == b"epochs").unwrap();
        tampered[pos + 9] = b'9';
        assert!(matches!(decode(&tampered, None), Err(Error::Checkpoint(m)) if m.contains("digest")));
    }

    #[test]
    fn truncated_and_trailing() {
        let (cfg, params) = sample();
        let bytes = encode(&cfg, &params);
        assert!(decode(&bytes[..bytes.len() - 1], None).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, None).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let (cfg, params) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &cfg, &params).unwrap();
        let (_, back) = load(&path, Some(&cfg)).unwrap();
        assert_eq!(back.tensors(), params.tensors());
        assert!(matches!(load(&dir.path().join("missing"), None), Err(Error::Io { .. })));
    }
}
