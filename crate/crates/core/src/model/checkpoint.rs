//! `SSC1` checkpoints: magic, little-endian u64 header length, JSON header,
//! then every tensor as little-endian f64 in layout order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"SSC1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    pub val_metric: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        config: model.config.clone(),
        meta: meta.clone(),
        tensors: model
            .layout
            .specs
            .iter()
            .map(|s| TensorHeader {
                name: s.name.clone(),
                rows: s.rows,
                cols: s.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(12 + json.len() + 8 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &model.params {
        for x in p.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not an SSC1 checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(12..12usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut offset = 12 + hlen;
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad(&format!("truncated tensor {}", t.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Mat::from_vec(t.rows, t.cols, data));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let model = Model::from_params(header.config, params).map_err(|e| bad(&e.to_string()))?;
    for (t, s) in header.tensors.iter().zip(&model.layout.specs) {
        if t.name != s.name {
            return Err(bad(&format!("tensor {} where {} expected", t.name, s.name)));
        }
    }
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ssc");
        let m = Model::new(ModelConfig::tiny(), 3).unwrap();
        let meta = CheckpointMeta {
            stage: "asr".into(),
            epoch: 2,
            step: 40,
            val_metric: Some(0.5),
        };
        save_checkpoint(&p, &m, &meta).unwrap();
        let c = load_checkpoint(&p).unwrap();
        assert_eq!(c.model, m);
        assert_eq!(c.meta, meta);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ssc");
        std::fs::write(&p, b"SSC0aaaaaaaaaaaa").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));
        let m = Model::new(ModelConfig::tiny(), 3).unwrap();
        save_checkpoint(&p, &m, &CheckpointMeta::default()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));
    }
}
