//! Versioned binary container for named tensors plus a JSON header.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CVCK" | u32 version | u64 header_len | header JSON
//! u32 tensor_count
//! per tensor: u16 name_len | name | u8 ndim (=2) | u32 rows | u32 cols | f64 data
//! SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{EncoderConfig, ModelParams};
use crate::autograd::{Mat, ParamSet};
use crate::datagen::atomic_write_file;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CVCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Serialises `header` and `tensors` into the container format.
pub fn encode_container(header: &Value, tensors: &ParamSet) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("JSON values always serialise");
    let mut out = Vec::with_capacity(64 + json.len() + tensors.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::corrupt(self.path, "unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container; `path` is only used in error messages.
pub fn decode_container(bytes: &[u8], path: &Path) -> Result<(Value, ParamSet)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::corrupt(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(Error::corrupt(path, "truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::corrupt(path, "checksum mismatch (truncated or modified)"));
    }
    let mut r = Reader { bytes: body, pos: 8, path };
    let json_len = r.u64()? as usize;
    let header: Value = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
    let count = r.u32()?;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::corrupt(path, "tensor name is not UTF-8"))?
            .to_string();
        if r.u8()? != 2 {
            return Err(Error::corrupt(path, format!("tensor {name} is not 2-D")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Mat::from_shape_vec((rows, cols), data).expect("length checked");
        tensors.insert(name, m);
    }
    if r.pos != body.len() {
        return Err(Error::corrupt(path, "trailing bytes"));
    }
    Ok((header, tensors))
}

pub fn write_container(path: &Path, header: &Value, tensors: &ParamSet) -> Result<()> {
    atomic_write_file(path, &encode_container(header, tensors))
}

pub fn read_container(path: &Path) -> Result<(Value, ParamSet)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes, path)
}

/// What to keep when loading a model checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    #[default]
    Full,
    /// Drop the image encoder and image head.
    PointBranch,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    encoder: EncoderConfig,
    d_proj: usize,
    #[serde(default)]
    extra: Value,
}

pub const MODEL_KIND: &str = "model";

/// Header JSON for a model checkpoint, with caller-provided metadata.
pub fn model_header(params: &ModelParams, extra: Value) -> Value {
    serde_json::to_value(ModelHeader {
        kind: MODEL_KIND.into(),
        encoder: params.config.clone(),
        d_proj: params.d_proj,
        extra,
    })
    .expect("plain data")
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    save_checkpoint_with(params, Value::Null, path)
}

/// Like [`save_checkpoint`] with extra metadata (config echo, task heads).
pub fn save_checkpoint_with(params: &ModelParams, extra: Value, path: &Path) -> Result<()> {
    write_container(path, &model_header(params, extra), &params.params)
}

/// Loads a model and its `extra` metadata.
pub fn load_checkpoint_with(path: &Path, mode: LoadMode) -> Result<(ModelParams, Value)> {
    let (header, tensors) = read_container(path)?;
    let header: ModelHeader = serde_json::from_value(header)
        .map_err(|e| Error::corrupt(path, format!("model header: {e}")))?;
    if header.kind != MODEL_KIND {
        return Err(Error::corrupt(path, format!("expected a model checkpoint, found {:?}", header.kind)));
    }
    let params = ModelParams::from_params(header.encoder, header.d_proj, tensors)
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
    let params = match mode {
        LoadMode::Full => params,
        LoadMode::PointBranch => params.point_branch_only(),
    };
    Ok((params, header.extra))
}

pub fn load_checkpoint(path: &Path, mode: LoadMode) -> Result<ModelParams> {
    Ok(load_checkpoint_with(path, mode)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams {
        let cfg = EncoderConfig {
            feature_dim: 8,
            transformer_heads: 2,
            transformer_depth: 1,
            projection_hidden: 8,
            image_size: (8, 8),
            ..EncoderConfig::default()
        };
        ModelParams::init(&cfg, 4, 5).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let m = model();
        save_checkpoint(&m, &a).unwrap();
        let loaded = load_checkpoint(&a, LoadMode::Full).unwrap();
        assert_eq!(loaded, m);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn discard_mode_drops_image_weights() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &p).unwrap();
        let m = load_checkpoint(&p, LoadMode::PointBranch).unwrap();
        assert!(!m.has_image_branch());
        assert!(m.params.iter().all(|(n, _)| !n.starts_with("image")));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&p, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&p, LoadMode::Full), Err(Error::Corrupt { .. })), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p, LoadMode::Full),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
