//! On-disk formats. All binary values are little-endian.

mod checkpoint;
mod dataset;
mod json;
mod qexp;

use std::path::Path;

pub use checkpoint::VERSION as LQEM_VERSION;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry,
};
pub use dataset::{load_benchmark, load_corpus, save_corpus, EMBEDDINGS_FILE, METADATA_FILE, TEST_FILE, VAL_FILE};
pub use json::{
    decode_annotations, decode_metadata, encode_annotations, encode_metadata, load_annotations, load_metadata,
    save_annotations, save_metadata, AnnotationFile,
};
pub use qexp::VERSION as QEXP_VERSION;
pub use qexp::{decode_qexp, encode_qexp, load_embeddings, save_embeddings, RawEmbeddings};

use crate::error::{Error, FormatError, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bounds-checked little-endian reader.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Self { bytes, pos: 0, format }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(FormatError::Truncated {
                format: self.format,
                needed: self.pos.saturating_add(n),
                found: self.bytes.len(),
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            }
            .into());
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn version(&mut self, supported: u32) -> Result<u32> {
        let found = self.u32()?;
        if found != supported {
            return Err(FormatError::UnsupportedVersion {
                format: self.format,
                found,
                supported,
            }
            .into());
        }
        Ok(found)
    }

    pub(crate) fn finish(&self, version: u32) -> Result<()> {
        let extra = self.bytes.len() - self.pos;
        if extra > 0 {
            return Err(FormatError::TrailingBytes {
                format: self.format,
                version,
                extra,
            }
            .into());
        }
        Ok(())
    }
}
