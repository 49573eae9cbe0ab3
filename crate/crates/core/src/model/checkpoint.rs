//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes   "MA3ECKPT"
//! version          u32
//! config_len       u32       followed by config_len bytes of `key = value` text
//! tensor_count     u32
//! per tensor:      name_len u32, name bytes, ndim u32, dims u64 × ndim,
//!                  offset u64 (byte offset into the payload)
//! payload          f32 values, tensors back to back
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::kv::parse_kv;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MA3ECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// The raw config block, including any keys beyond the model's.
    pub config_text: String,
    pub config: BTreeMap<String, String>,
    pub model_config: ModelConfig,
    pub params: ModelParams,
}

pub fn encode_checkpoint(config_text: &str, params: &ModelParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * data.len() as u64;
    }
    for (_, _, data) in &tensors {
        for &v in *data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, config_text: &str, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(config_text, params)).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = parse_kv(&config_text)?;
    let model_config = ModelConfig::from_kv(&config)?;

    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        table.push((name, shape, offset));
    }
    let payload = &bytes[r.pos..];

    // shapes and order come from the config; the file must agree exactly
    let mut params = ModelParams::init(&model_config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != table.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors in file, config implies {}",
            table.len(),
            expected.len()
        )));
    }
    for ((name, shape, _), (want_name, want_shape)) in table.iter().zip(&expected) {
        if name != want_name || shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {shape:?} does not match expected {want_name} {want_shape:?}"
            )));
        }
    }
    for ((_, dst), (name, _, offset)) in params.tensors_mut().into_iter().zip(&table) {
        let end = offset + 4 * dst.len();
        let src = payload
            .get(*offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload for {name} out of range")))?;
        for (d, c) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")));
        }
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok(Checkpoint {
        config_text,
        config,
        model_config,
        params,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig {
            image_size: 16,
            p: 4,
            enc_dim: 8,
            enc_heads: 2,
            dec_dim: 8,
            dec_heads: 2,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (cfg, params)
    }

    #[test]
    fn round_trip_within_f32_precision() {
        let (cfg, params) = small();
        let text = format!("{}steps = 10\n", cfg.to_kv());
        let ck = decode_checkpoint(&encode_checkpoint(&text, &params)).unwrap();
        assert_eq!(ck.model_config, cfg);
        assert_eq!(ck.config["steps"], "10");
        assert_eq!(ck.params.pos_embed_enc, params.pos_embed_enc);
        for ((_, _, a), (_, _, b)) in ck.params.tensors().iter().zip(params.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn rejects_other_versions() {
        let (cfg, params) = small();
        let mut bytes = encode_checkpoint(&cfg.to_kv(), &params);
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let (cfg, params) = small();
        let other = ModelConfig { enc_dim: 16, ..cfg };
        let bytes = encode_checkpoint(&other.to_kv(), &params);
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let (cfg, params) = small();
        let bytes = encode_checkpoint(&cfg.to_kv(), &params);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
