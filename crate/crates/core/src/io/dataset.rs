//! Dataset directories: `embeddings.qexp`, `metadata.jsonl` and optional
//! `val.json` / `test.json` annotation files.
//!
//! Externally supplied benchmarks use the same layout with their database
//! rows in split `test`, queries in `test-query` and annotations in
//! `test.json`.

use std::path::{Path, PathBuf};

use super::{load_annotations, load_embeddings, load_metadata, save_annotations, save_embeddings, save_metadata};
use crate::error::Result;
use crate::eval::{Benchmark, QueryAnnotation};
use crate::synth::{Corpus, Stage};

pub const EMBEDDINGS_FILE: &str = "embeddings.qexp";
pub const METADATA_FILE: &str = "metadata.jsonl";
pub const VAL_FILE: &str = "val.json";
pub const TEST_FILE: &str = "test.json";

/// Writes every file of the corpus and returns their paths.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = [EMBEDDINGS_FILE, METADATA_FILE, VAL_FILE, TEST_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    save_embeddings(&paths[0], &corpus.embeddings)?;
    save_metadata(&paths[1], &corpus.metadata)?;
    save_annotations(&paths[2], &corpus.val_annotations)?;
    save_annotations(&paths[3], &corpus.test_annotations)?;
    Ok(paths)
}

fn optional_annotations(path: &Path) -> Result<Vec<QueryAnnotation>> {
    if path.exists() {
        load_annotations(path)
    } else {
        Ok(Vec::new())
    }
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let metadata = load_metadata(&dir.join(METADATA_FILE))?;
    let ids = metadata.iter().map(|m| m.id.clone()).collect::<Vec<_>>();
    let embeddings = load_embeddings(&dir.join(EMBEDDINGS_FILE), Some(ids))?;
    Ok(Corpus {
        embeddings,
        metadata,
        val_annotations: optional_annotations(&dir.join(VAL_FILE))?,
        test_annotations: optional_annotations(&dir.join(TEST_FILE))?,
    })
}

/// Benchmark of one stage, named after the directory and stage.
pub fn load_benchmark(dir: &Path, stage: Stage) -> Result<Benchmark> {
    let mut bench = load_corpus(dir)?.benchmark(stage)?;
    let base = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    bench.name = match stage {
        Stage::Val => format!("{base}-val"),
        Stage::Test => format!("{base}-test"),
    };
    Ok(bench)
}
