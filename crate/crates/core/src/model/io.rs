//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | offset      | size    | content                                   |
//! |-------------|---------|-------------------------------------------|
//! | 0           | 8       | magic `FPOCKPT\0`                         |
//! | 8           | 4       | `u32` format version                      |
//! | 12          | 4       | `u32` header length `L`                   |
//! | 16          | `L`     | UTF-8 JSON header                         |
//! | 16 + L      | 8       | `u64` parameter count `N`                 |
//! | 24 + L      | 8 * N   | `f64` parameters in layout order          |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelCheckpoint, ModelConfig, Segment};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FPOCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    rng_seed: u64,
    param_count: usize,
    segments: Vec<Segment>,
    config_hash: String,
}

pub fn encode_checkpoint(ckpt: &ModelCheckpoint, config_hash: &str) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let header = Header {
        config: ckpt.config.clone(),
        rng_seed: ckpt.rng_seed,
        param_count: ckpt.params.len(),
        segments: ckpt.layout().segments(),
        config_hash: config_hash.to_string(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(24 + header.len() + 8 * ckpt.params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for p in &ckpt.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelCheckpoint, String)> {
    let take = |at: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))
    };
    if take(0, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(8, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion {
            what: "checkpoint".into(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(take(12, 4)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(16, hlen)?)?;
    let n = u64::from_le_bytes(take(16 + hlen, 8)?.try_into().unwrap()) as usize;
    if n != header.param_count {
        return Err(Error::Format(format!(
            "payload count {n} disagrees with header count {}",
            header.param_count
        )));
    }
    let payload = take(24 + hlen, 8 * n)?;
    if bytes.len() != 24 + hlen + 8 * n {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let ckpt = ModelCheckpoint {
        config: header.config,
        params,
        rng_seed: header.rng_seed,
    };
    ckpt.validate()?;
    Ok((ckpt, header.config_hash))
}

pub fn write_checkpoint(path: &Path, ckpt: &ModelCheckpoint, config_hash: &str) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt, config_hash)?)?;
    Ok(())
}

/// Reads a checkpoint and the config hash it was written under.
pub fn read_checkpoint(path: &Path) -> Result<(ModelCheckpoint, String)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn encode_decode_preserves_bits() {
        let ck = init_model(&ModelConfig::default(), 17).unwrap();
        let bytes = encode_checkpoint(&ck, "abc").unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let (back, hash) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back, "abc").unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_reports_both() {
        let ck = init_model(&ModelConfig::default(), 1).unwrap();
        let mut bytes = encode_checkpoint(&ck, "h").unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        match decode_checkpoint(&bytes) {
            Err(Error::SchemaVersion { found, expected, .. }) => {
                assert_eq!((found, expected), (7, CHECKPOINT_VERSION));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let ck = init_model(&ModelConfig::default(), 1).unwrap();
        let bytes = encode_checkpoint(&ck, "h").unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"nope").is_err());
    }
}
