//! Database-side augmentation: every database vector is replaced by its own
//! expansion over the original database.

use rayon::prelude::*;

use crate::error::Result;
use crate::expand::Expander;
use crate::index::{EmbeddingMatrix, NeighborList};

/// Expands every row with `ndba` neighbors from `index` (itself excluded).
/// A row whose expansion fails keeps its original vector.
pub fn augment_database(index: &EmbeddingMatrix, expander: &Expander, ndba: usize) -> Result<EmbeddingMatrix> {
    Ok(augment_database_with_fallbacks(index, expander, ndba)?.0)
}

/// [`augment_database`] that also reports which rows fell back.
pub fn augment_database_with_fallbacks(
    index: &EmbeddingMatrix,
    expander: &Expander,
    ndba: usize,
) -> Result<(EmbeddingMatrix, Vec<usize>)> {
    if ndba == 0 {
        return Ok((index.clone(), Vec::new()));
    }
    let expander = expander.with_nqe(ndba)?;
    let rows: Vec<std::result::Result<Vec<f32>, String>> = (0..index.len())
        .into_par_iter()
        .map(|r| expander.expand(index.row(r), index, &[r]).map_err(|e| e.to_string()))
        .collect();
    let mut data = Vec::with_capacity(index.data().len());
    let mut fallbacks = Vec::new();
    for (r, res) in rows.into_iter().enumerate() {
        match res {
            Ok(v) => data.extend(v),
            Err(msg) => {
                log::warn!("augmentation of `{}` failed, keeping original: {msg}", index.id(r));
                data.extend_from_slice(index.row(r));
                fallbacks.push(r);
            }
        }
    }
    Ok((index.with_data(data)?, fallbacks))
}

/// Augments the database, expands each query against it and returns the
/// top `k` results per query.
pub fn dba_then_qe(
    index: &EmbeddingMatrix,
    dba: &Expander,
    ndba: usize,
    qe: &Expander,
    queries: &[&[f32]],
    k: usize,
) -> Result<Vec<NeighborList>> {
    let augmented = augment_database(index, dba, ndba)?;
    queries
        .par_iter()
        .map(|q| {
            let e = qe.expand(q, &augmented, &[])?;
            augmented.knn(&e, k, &[])
        })
        .collect()
}
