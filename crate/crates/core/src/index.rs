//! Exact cosine-similarity search over an in-memory embedding matrix.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm};

/// `N × D` row-major embeddings with unique item identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
    positions: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self> {
        if dim == 0 && !ids.is_empty() {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if data.len() != dim * ids.len() {
            return Err(Error::Shape(format!(
                "{} ids with dimension {dim} need {} values, got {}",
                ids.len(),
                dim * ids.len(),
                data.len()
            )));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), row).is_some() {
                return Err(Error::Data(format!("duplicate item id `{id}`")));
            }
        }
        Ok(Self {
            dim,
            data,
            ids,
            positions,
        })
    }

    /// Rows given as slices, ids generated as `item{row}`.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Shape("rows of unequal length".into()));
            }
            data.extend_from_slice(r);
        }
        let ids = (0..rows.len()).map(|i| format!("item{i}")).collect();
        Self::new(dim, data, ids)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            ids: Vec::new(),
            positions: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim.max(1)).take(self.ids.len())
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    /// Copy with every row scaled to unit ℓ2 norm.
    pub fn normalize_rows(&self) -> Result<Self> {
        let mut data = self.data.clone();
        for (row, chunk) in data.chunks_mut(self.dim.max(1)).enumerate() {
            let norm = l2_norm(chunk);
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Data(format!(
                    "item `{}` has a zero or non-finite embedding",
                    self.ids[row]
                )));
            }
            chunk.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self { data, ..self.clone() })
    }

    /// New matrix holding the given rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            ids.push(self.ids[r].clone());
        }
        Self::new(self.dim, data, ids)
    }

    /// Same ids, new row values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::Shape("replacement data has a different size".into()));
        }
        Ok(Self { data, ..self.clone() })
    }

    /// Stacks two matrices with the same dimension.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim && !self.is_empty() && !other.is_empty() {
            return Err(Error::Shape("cannot stack matrices of different dimension".into()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let mut ids = self.ids.clone();
        ids.extend(other.ids.iter().cloned());
        Self::new(self.dim.max(other.dim), data, ids)
    }

    fn check_query(&self, q: &[f32]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::Shape(format!(
                "query has dimension {}, index has {}",
                q.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn similarities(&self, q: &[f32]) -> Result<Vec<f32>> {
        self.check_query(q)?;
        Ok(self.rows().map(|r| dot(q, r)).collect())
    }

    /// The `k` most similar rows not listed in `exclude`.
    pub fn knn(&self, q: &[f32], k: usize, exclude: &[usize]) -> Result<NeighborList> {
        let sims = self.similarities(q)?;
        Ok(NeighborList::new(select(&sims, k, exclude, descending)))
    }

    /// The `k` least similar rows not listed in `exclude`, ascending similarity.
    pub fn bottom_k(&self, q: &[f32], k: usize, exclude: &[usize]) -> Result<NeighborList> {
        let sims = self.similarities(q)?;
        Ok(NeighborList::new(select(&sims, k, exclude, ascending)))
    }

    /// Every row ranked by decreasing similarity.
    pub fn rank_all(&self, q: &[f32]) -> Result<NeighborList> {
        self.knn(q, self.len(), &[])
    }

    /// [`EmbeddingMatrix::knn`] for many queries at once; order of results matches `queries`.
    pub fn knn_batch(&self, queries: &[&[f32]], k: usize) -> Result<Vec<NeighborList>> {
        queries.par_iter().map(|q| self.knn(q, k, &[])).collect()
    }
}

fn descending(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity.total_cmp(&a.similarity).then(a.row.cmp(&b.row))
}

fn ascending(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.similarity.total_cmp(&b.similarity).then(a.row.cmp(&b.row))
}

fn select(sims: &[f32], k: usize, exclude: &[usize], order: fn(&Neighbor, &Neighbor) -> Ordering) -> Vec<Neighbor> {
    let mut cands: Vec<Neighbor> = sims
        .iter()
        .enumerate()
        .filter(|(row, _)| !exclude.contains(row))
        .map(|(row, &similarity)| Neighbor { row, similarity })
        .collect();
    if k < cands.len() {
        if k == 0 {
            return Vec::new();
        }
        cands.select_nth_unstable_by(k - 1, order);
        cands.truncate(k);
    }
    cands.sort_unstable_by(order);
    cands
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub similarity: f32,
}

/// Ranked search results. Ties in similarity are ordered by ascending row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborList {
    pub query: Option<String>,
    pub entries: Vec<Neighbor>,
}

impl NeighborList {
    pub fn new(entries: Vec<Neighbor>) -> Self {
        Self { query: None, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rows(&self) -> Vec<usize> {
        self.entries.iter().map(|n| n.row).collect()
    }

    pub fn similarities(&self) -> Vec<f32> {
        self.entries.iter().map(|n| n.similarity).collect()
    }

    /// First `k` entries.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            query: self.query.clone(),
            entries: self.entries.iter().take(k).copied().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis() -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap()
    }

    #[test]
    fn normalizes_rows() {
        let m = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0, 0.0, 0.0], vec![1.0, 1.0, 1.0, 1.0]])
            .unwrap()
            .normalize_rows()
            .unwrap();
        assert_eq!(m.row(0), &[0.6, 0.8, 0.0, 0.0]);
        assert_eq!(m.row(1), &[0.5; 4]);
        let again = m.normalize_rows().unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn zero_row_names_the_item() {
        let m = EmbeddingMatrix::new(2, vec![1.0, 0.0, 0.0, 0.0], vec!["a".into(), "b".into()]).unwrap();
        let err = m.normalize_rows().unwrap_err();
        assert!(matches!(&err, Error::Data(msg) if msg.contains("`b`")));
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(EmbeddingMatrix::new(1, vec![1.0, 1.0], vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn knn_orthonormal_tie_break() {
        let m = basis();
        let res = m.knn(&[1.0, 0.0, 0.0], 2, &[]).unwrap();
        assert_eq!(res.rows(), vec![0, 1]);
        assert_eq!(res.similarities(), vec![1.0, 0.0]);
    }

    #[test]
    fn knn_excludes_and_saturates() {
        let m = basis();
        let res = m.knn(&[1.0, 0.0, 0.0], 10, &[0]).unwrap();
        assert_eq!(res.rows(), vec![1, 2]);
        assert!(m.knn(&[1.0, 0.0, 0.0], 0, &[]).unwrap().is_empty());
    }

    #[test]
    fn bottom_k_finds_antipode() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let res = m.bottom_k(&[1.0, 0.0], 1, &[]).unwrap();
        assert_eq!(
            res.entries,
            vec![Neighbor {
                row: 1,
                similarity: -1.0
            }]
        );
        let all = m.bottom_k(&[1.0, 0.0], 2, &[]).unwrap();
        assert_eq!(all.rows(), vec![1, 0]);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(basis().knn(&[1.0, 0.0], 1, &[]), Err(Error::Shape(_))));
        assert!(matches!(basis().bottom_k(&[1.0], 1, &[]), Err(Error::Shape(_))));
    }
}
