//! Binary checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "TGCKPT\0\0"
//! version      u32       1
//! header_len   u64
//! header       JSON      {format, version, config, vocab_digest, property_spec, tensors, extra}
//! tensors      f32 x N   in header order, each rows*cols values, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use treegen_core::Vocab;

use crate::config::ModelConfig;
use crate::model::Model;
use crate::params::{Layout, Params};
use crate::props::PropertySpec;

pub const MAGIC: &[u8; 8] = b"TGCKPT\0\0";
pub const VERSION: u32 = 1;
const FORMAT: &str = "treegen-checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint was trained with vocabulary {found}, but vocabulary {expected} was supplied")]
    VocabMismatch { expected: String, found: String },
    #[error("tensor table does not match the model layout: {0}")]
    Layout(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab_digest: String,
    property_spec: PropertySpec,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab_digest: String,
    /// Free-form run metadata (resolved configuration and the like).
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, vocab: &Vocab, extra: &serde_json::Value) -> Result<(), CheckpointError> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        vocab_digest: vocab.digest(),
        property_spec: model.spec.clone(),
        tensors: model
            .layout
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
        extra: extra.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut buf = Vec::with_capacity(8 + 4 + 8 + json.len() + 4 * model.params.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for x in &model.params.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Loads a checkpoint; when `vocab` is given its digest must match the one
/// recorded at save time.
pub fn load_checkpoint(path: &Path, vocab: Option<&Vocab>) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(CheckpointError::Header("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(CheckpointError::Header(format!("format {} version {}", header.format, header.version)));
    }
    if let Some(v) = vocab {
        let expected = v.digest();
        if expected != header.vocab_digest {
            return Err(CheckpointError::VocabMismatch {
                expected,
                found: header.vocab_digest,
            });
        }
    }
    header.config.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;
    let layout = Layout::new(&header.config, &header.property_spec);
    if layout.tensors.len() != header.tensors.len() {
        return Err(CheckpointError::Layout(format!(
            "{} tensors stored, {} expected",
            header.tensors.len(),
            layout.tensors.len()
        )));
    }
    for (want, got) in layout.tensors.iter().zip(&header.tensors) {
        if want.name != got.name || want.rows != got.rows || want.cols != got.cols {
            return Err(CheckpointError::Layout(format!(
                "found {} [{}x{}], expected {} [{}x{}]",
                got.name, got.rows, got.cols, want.name, want.rows, want.cols
            )));
        }
    }
    let data = &body[hlen..];
    if data.len() != 4 * layout.total {
        return Err(CheckpointError::Layout(format!("{} tensor bytes, expected {}", data.len(), 4 * layout.total)));
    }
    let params = Params {
        data: data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Ok(Checkpoint {
        model: Model::from_parts(header.config, header.property_spec, params),
        vocab_digest: header.vocab_digest,
        extra: header.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Arch, PropEncoder};
    use crate::model::tests::{tiny_config, toy_inputs, toy_spec, toy_vocab};
    use crate::model::SeqInput;

    #[test]
    fn round_trip_is_bit_exact() {
        let v = toy_vocab();
        let spec = toy_spec();
        let model: Model<f32> = Model::new(tiny_config(&v, Arch::Modern, PropEncoder::Mlp), spec.clone(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let extra = serde_json::json!({"epochs": 2});
        save_checkpoint(&path, &model, &v, &extra).unwrap();
        let ck = load_checkpoint(&path, Some(&v)).unwrap();
        assert_eq!(ck.model.params, model.params);
        assert_eq!(ck.extra, extra);
        let inputs: Vec<SeqInput> = toy_inputs(&v, &spec, 1).into_iter().map(|e| e.input).collect();
        assert_eq!(model.forward(&inputs).unwrap(), ck.model.forward(&inputs).unwrap());
    }

    #[test]
    fn rejects_other_vocab_and_corruption() {
        let v = toy_vocab();
        let model: Model<f32> = Model::new(tiny_config(&v, Arch::Legacy, PropEncoder::Linear), toy_spec(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, &v, &serde_json::Value::Null).unwrap();
        let other = Vocab::induce(&[treegen_core::parse_smiles("CCO").unwrap()], 4).unwrap();
        assert!(matches!(load_checkpoint(&path, Some(&other)), Err(CheckpointError::VocabMismatch { .. })));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(CheckpointError::Version(9))));
        bytes[8] = 1;
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(CheckpointError::Layout(_))));
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(CheckpointError::Magic)));
    }
}
