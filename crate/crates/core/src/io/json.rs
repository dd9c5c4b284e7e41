//! Metadata (JSON lines) and query annotations (JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::error::{Error, FormatError, Result};
use crate::eval::QueryAnnotation;
use crate::synth::ItemMeta;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub queries: Vec<QueryAnnotation>,
}

/// Schema error from a serde failure; the field is taken from the message
/// when serde names one.
fn schema(line: usize, e: &serde_json::Error) -> Error {
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("field"))
        .unwrap_or("")
        .to_string();
    FormatError::Schema {
        line,
        field,
        message: msg,
    }
    .into()
}

pub fn encode_metadata(items: &[ItemMeta]) -> Result<String> {
    let mut out = String::new();
    for m in items {
        out.push_str(&serde_json::to_string(m).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// One record per line; `row` must count up from 0.
pub fn decode_metadata(text: &str) -> Result<Vec<ItemMeta>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let m: ItemMeta = serde_json::from_str(line).map_err(|e| schema(n, &e))?;
        if m.row != out.len() {
            return Err(FormatError::Schema {
                line: n,
                field: "row".into(),
                message: format!("expected row {}, found {}", out.len(), m.row),
            }
            .into());
        }
        out.push(m);
    }
    Ok(out)
}

pub fn encode_annotations(queries: &[QueryAnnotation]) -> Result<String> {
    let file = AnnotationFile {
        queries: queries.to_vec(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Data(e.to_string()))
}

pub fn decode_annotations(text: &str) -> Result<Vec<QueryAnnotation>> {
    let file: AnnotationFile = serde_json::from_str(text).map_err(|e| schema(e.line(), &e))?;
    for a in &file.queries {
        a.validate()?;
    }
    Ok(file.queries)
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn save_metadata(path: &Path, items: &[ItemMeta]) -> Result<()> {
    write_file(path, encode_metadata(items)?.as_bytes())
}

pub fn load_metadata(path: &Path) -> Result<Vec<ItemMeta>> {
    decode_metadata(&read_text(path)?)
}

pub fn save_annotations(path: &Path, queries: &[QueryAnnotation]) -> Result<()> {
    write_file(path, encode_annotations(queries)?.as_bytes())
}

pub fn load_annotations(path: &Path) -> Result<Vec<QueryAnnotation>> {
    decode_annotations(&read_text(path)?)
}
