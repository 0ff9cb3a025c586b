//! Versioned binary parameter container.
//!
//! ```text
//! magic "BHOCKPT\x01" | u32 version | u32 reserved
//! u64 config length | model config as JSON
//! u64 tensor count
//! per tensor: u32 name length | name | u64 rows | u64 cols | rows*cols f64
//! ```
//!
//! All integers and floats are little endian. Tensors appear in the model's
//! fixed traversal order; loading matches them by name.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BHOCKPT\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(params: &ModelParams, cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    let cfg_json = serde_json::to_vec(cfg).expect("model config serializes");
    out.extend_from_slice(&(cfg_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    out.extend_from_slice(&(params.tensor_count() as u64).to_le_bytes());
    params.for_each(|name, t| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        let slice = self.bytes.get(self.pos..end).ok_or("truncated checkpoint")?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(ModelParams, ModelConfig), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    r.u32()?;
    let cfg_len = r.u64()? as usize;
    let cfg: ModelConfig =
        serde_json::from_slice(r.take(cfg_len)?).map_err(|e| format!("config: {e}"))?;
    cfg.validate().map_err(|e| e.to_string())?;

    let count = r.u64()? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| e.to_string())?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let len = rows.checked_mul(cols).ok_or("tensor size overflow")?;
        let payload = r.take(len.checked_mul(8).ok_or("tensor size overflow")?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(format!("duplicate tensor {name}"));
        }
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after last tensor".into());
    }

    let shapes = ModelParams::shapes(&cfg);
    let mut missing = None;
    let params = shapes.map(|name, &shape| match tensors.remove(name) {
        Some(t) if t.dim() == shape => t,
        other => {
            missing.get_or_insert_with(|| match other {
                Some(t) => format!("tensor {name} has shape {:?}, expected {shape:?}", t.dim()),
                None => format!("tensor {name} missing"),
            });
            Array2::zeros(shape)
        }
    });
    if let Some(msg) = missing {
        return Err(msg);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(format!("unexpected tensor {extra}"));
    }
    Ok((params, cfg))
}

pub fn save(path: &Path, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    fs::write(path, encode(params, cfg)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::ParseError {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init_with_std(&cfg, 3, 0.7);
        let bytes = encode(&params, &cfg);
        let (back, cfg2) = decode(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        back.zip(&params).for_each(|_, (a, b)| {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        });
        assert_eq!(encode(&back, &cfg2), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig::tiny();
        let bytes = encode(&ModelParams::init(&cfg, 0), &cfg);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode(&bad).unwrap_err().contains("version"));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
