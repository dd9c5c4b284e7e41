//! `LQEM` checkpoints: magic, u32 version, u64 header length, JSON header,
//! then every tensor's raw values back to back.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file, Reader};
use crate::error::{Error, FormatError, Result};
use crate::lattqe::{LAttQe, LAttQeConfig};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"LQEM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: LAttQeConfig,
    pub temperature: f64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (training config, epoch, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode_checkpoint(model: &LAttQe<f32>, extra: serde_json::Value) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.params().len());
    for p in model.params().iter() {
        let offset = payload.len();
        for v in p.value.data() {
            v.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: f32::DTYPE.to_string(),
            offset,
            length: payload.len() - offset,
        });
    }
    let header = CheckpointHeader {
        model: model.config().clone(),
        temperature: model.temperature(),
        tensors,
        extra,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn entry_error(entry: &TensorEntry, message: String) -> Error {
    FormatError::Schema {
        line: 1,
        field: format!("tensors.{}", entry.name),
        message,
    }
    .into()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(LAttQe<f32>, CheckpointHeader)> {
    let mut r = Reader::new(bytes, "LQEM");
    r.magic(MAGIC)?;
    let version = r.version(VERSION)?;
    let header_len = usize::try_from(r.u64()?).map_err(|_| Error::Data("header length overflows".into()))?;
    let json = r.take(header_len)?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| {
        Error::from(FormatError::Schema {
            line: e.line(),
            field: "header".into(),
            message: e.to_string(),
        })
    })?;
    let mut expected_offset = 0usize;
    for t in &header.tensors {
        if t.dtype != f32::DTYPE {
            return Err(entry_error(t, format!("unsupported dtype `{}`", t.dtype)));
        }
        let count: usize = t.shape.iter().product();
        if t.offset != expected_offset || t.length != count * f32::BYTES {
            return Err(entry_error(
                t,
                format!(
                    "offset {} / length {} do not match shape {:?}",
                    t.offset, t.length, t.shape
                ),
            ));
        }
        expected_offset += t.length;
    }
    let payload = r.take(expected_offset)?;
    r.finish(version)?;
    let values = header
        .tensors
        .iter()
        .map(|t| {
            let data = payload[t.offset..t.offset + t.length]
                .chunks_exact(f32::BYTES)
                .map(f32::read_le)
                .collect();
            Ok((t.name.clone(), Tensor::new(t.shape.clone(), data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = LAttQe::from_parameters(header.model.clone(), values)?;
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &LAttQe<f32>, extra: serde_json::Value) -> Result<()> {
    write_file(path, &encode_checkpoint(model, extra)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(LAttQe<f32>, CheckpointHeader)> {
    decode_checkpoint(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> LAttQe<f32> {
        let cfg = LAttQeConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            kmax: 4,
            ..LAttQeConfig::default()
        };
        let mut m = LAttQe::new(cfg, 3).unwrap();
        m.set_temperature(0.25).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m, serde_json::json!({"epoch": 3})).unwrap();
        let (back, header) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(header.extra["epoch"], 3);
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            assert!(a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode_checkpoint(&back, header.extra).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&model(), serde_json::Value::Null).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0]);
        assert!(matches!(
            decode_checkpoint(&long),
            Err(Error::Format(FormatError::TrailingBytes { extra: 2, .. }))
        ));
        let mut magic = bytes.clone();
        magic[..4].copy_from_slice(b"QEXP");
        assert!(matches!(
            decode_checkpoint(&magic),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(
            decode_checkpoint(&ver),
            Err(Error::Format(FormatError::UnsupportedVersion { found: 9, .. }))
        ));
    }
}
