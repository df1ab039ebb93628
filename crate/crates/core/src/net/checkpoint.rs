//! Single-file checkpoints: magic, version, JSON header, raw f32 tensors.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::ParamInfo;
use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EHOICKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    params: Vec<ParamInfo>,
    /// Free-form context: training config, seed, regime.
    #[serde(default)]
    meta: serde_json::Value,
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

pub fn to_bytes(model: &Model, meta: &serde_json::Value) -> Vec<u8> {
    let header = Header { format_version: FORMAT_VERSION, config: model.config.clone(), params: model.params.info.clone(), meta: meta.clone() };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 4 * model.n_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &model.params.values {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, model: &Model, meta: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<(Model, serde_json::Value)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(path, format!("header: {e}")))?;
    let mut model = Model::new(header.config, 0).map_err(|e| bad(path, e.to_string()))?;
    if model.params.info != header.params {
        return Err(bad(path, "parameter layout does not match the model definition"));
    }
    let mut data = &bytes[20 + hlen..];
    if data.len() != 4 * model.n_parameters() {
        return Err(bad(path, format!("expected {} tensor bytes, found {}", 4 * model.n_parameters(), data.len())));
    }
    for v in model.params.values.iter_mut() {
        for x in v.iter_mut() {
            let mut b = [0u8; 4];
            data.read_exact(&mut b).expect("length checked");
            *x = f32::from_le_bytes(b);
        }
    }
    Ok((model, header.meta))
}

pub fn load(path: &Path) -> Result<(Model, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = Model::new(ModelConfig::default(), 5).unwrap();
        let meta = serde_json::json!({"seed": 5});
        let bytes = to_bytes(&m, &meta);
        let (back, meta2) = from_bytes(Path::new("x"), &bytes).unwrap();
        assert_eq!(back.params.values, m.params.values);
        assert_eq!(back.config, m.config);
        assert_eq!(meta2, meta);
        assert_eq!(to_bytes(&back, &meta2), bytes);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let m = Model::new(ModelConfig::default(), 5).unwrap();
        let bytes = to_bytes(&m, &serde_json::Value::Null);
        assert!(matches!(from_bytes(Path::new("x"), b"nope"), Err(Error::Checkpoint { .. })));
        assert!(matches!(from_bytes(Path::new("x"), &bytes[..bytes.len() - 4]), Err(Error::Checkpoint { .. })));
    }
}
