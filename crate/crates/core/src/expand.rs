//! One entry point for every expansion method.

use std::sync::Arc;

use crate::classic::{expand_classic, expand_with_neighbors, Method, QeConfig, WeightMode};
use crate::error::{Error, Result};
use crate::index::EmbeddingMatrix;
use crate::lattqe::LAttQe;

#[derive(Clone, Debug)]
pub enum Expander {
    Classic(QeConfig),
    Learned {
        model: Arc<LAttQe<f32>>,
        nqe: usize,
        mode: WeightMode,
    },
}

impl Expander {
    pub fn none() -> Self {
        Expander::Classic(QeConfig::default())
    }

    pub fn classic(config: QeConfig) -> Result<Self> {
        if config.method == Method::Lattqe {
            return Err(Error::Config("lattqe needs a model; use Expander::learned".into()));
        }
        config.validate()?;
        Ok(Expander::Classic(config))
    }

    pub fn learned(model: Arc<LAttQe<f32>>, nqe: usize, mode: WeightMode) -> Result<Self> {
        if nqe > model.config().kmax {
            return Err(Error::Capacity(format!(
                "nqe {nqe} exceeds the model capacity of {} neighbors",
                model.config().kmax
            )));
        }
        Ok(Expander::Learned { model, nqe, mode })
    }

    pub fn nqe(&self) -> usize {
        match self {
            Expander::Classic(c) => {
                if c.method == Method::None {
                    0
                } else {
                    c.nqe
                }
            }
            Expander::Learned { nqe, .. } => *nqe,
        }
    }

    /// Same method with a different neighbor count.
    pub fn with_nqe(&self, nqe: usize) -> Result<Self> {
        match self {
            Expander::Classic(c) => Ok(Expander::Classic(QeConfig { nqe, ..c.clone() })),
            Expander::Learned { model, mode, .. } => Self::learned(model.clone(), nqe, *mode),
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Expander::Classic(c) => c.method,
            Expander::Learned { .. } => Method::Lattqe,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Expander::Classic(c) => c.label(),
            Expander::Learned { mode, .. } => format!("lattqe[{mode}]"),
        }
    }

    /// Expanded version of `q` against `index`, never using rows in `exclude`.
    pub fn expand(&self, q: &[f32], index: &EmbeddingMatrix, exclude: &[usize]) -> Result<Vec<f32>> {
        match self {
            Expander::Classic(c) => expand_classic(q, index, c, exclude),
            Expander::Learned { model, nqe, mode } => {
                let nn = index.knn(q, *nqe, exclude)?;
                let rows: Vec<&[f32]> = nn.entries.iter().map(|n| index.row(n.row)).collect();
                model.expand_with_mode(q, &rows, *mode)
            }
        }
    }

    /// Expansion from a neighbor list that was already retrieved.
    pub fn expand_from(
        &self,
        q: &[f32],
        index: &EmbeddingMatrix,
        neighbors: &crate::index::NeighborList,
        exclude: &[usize],
    ) -> Result<Vec<f32>> {
        let nn = neighbors.truncated(self.nqe());
        match self {
            Expander::Classic(c) if c.method == Method::None => Ok(q.to_vec()),
            Expander::Classic(c) => expand_with_neighbors(q, index, &nn, c, exclude),
            Expander::Learned { model, mode, .. } => {
                let rows: Vec<&[f32]> = nn.entries.iter().map(|n| index.row(n.row)).collect();
                model.expand_with_mode(q, &rows, *mode)
            }
        }
    }
}
