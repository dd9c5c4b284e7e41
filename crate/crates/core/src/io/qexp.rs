//! `QEXP` embeddings: magic, u32 version, u32 rows, u32 dim, f32 values.

use std::path::Path;

use super::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::index::EmbeddingMatrix;
use crate::synth::item_id;

const MAGIC: &[u8; 4] = b"QEXP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RawEmbeddings {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

pub fn encode_qexp(rows: usize, dim: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != rows * dim {
        return Err(Error::Shape(format!(
            "{rows}×{dim} embeddings with {} values",
            data.len()
        )));
    }
    let (r, d) = (
        u32::try_from(rows).map_err(|_| Error::Data("too many rows for QEXP".into()))?,
        u32::try_from(dim).map_err(|_| Error::Data("dimension too large for QEXP".into()))?,
    );
    let mut out = Vec::with_capacity(16 + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&r.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_qexp(bytes: &[u8]) -> Result<RawEmbeddings> {
    let mut r = Reader::new(bytes, "QEXP");
    r.magic(MAGIC)?;
    let version = r.version(VERSION)?;
    let rows = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let payload = r.take(rows * dim * 4)?;
    r.finish(version)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(RawEmbeddings { rows, dim, data })
}

pub fn save_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    write_file(path, &encode_qexp(m.len(), m.dim(), m.data())?)
}

/// Loads a matrix; ids come from `ids` or default to the synthetic scheme.
pub fn load_embeddings(path: &Path, ids: Option<Vec<String>>) -> Result<EmbeddingMatrix> {
    let raw = decode_qexp(&read_file(path)?)?;
    let ids = match ids {
        Some(ids) if ids.len() != raw.rows => {
            return Err(Error::Data(format!(
                "{} holds {} rows but {} ids were given",
                path.display(),
                raw.rows,
                ids.len()
            )))
        }
        Some(ids) => ids,
        None => (0..raw.rows).map(item_id).collect(),
    };
    EmbeddingMatrix::new(raw.dim, raw.data, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::FormatError;

    #[test]
    fn round_trip_is_bit_exact() {
        for (rows, dim) in [(0usize, 3usize), (1, 1), (7, 5)] {
            let data: Vec<f32> = (0..rows * dim).map(|i| (i as f32 * 0.37).sin() / 3.0).collect();
            let raw = decode_qexp(&encode_qexp(rows, dim, &data).unwrap()).unwrap();
            assert_eq!((raw.rows, raw.dim), (rows, dim));
            assert!(raw.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn distinct_failure_kinds() {
        let good = encode_qexp(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_qexp(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_qexp(&v2),
            Err(Error::Format(FormatError::UnsupportedVersion { found: 2, .. }))
        ));
        assert!(matches!(
            decode_qexp(&good[..good.len() - 1]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            decode_qexp(&long),
            Err(Error::Format(FormatError::TrailingBytes {
                version: 1,
                extra: 1,
                ..
            }))
        ));
    }
}
