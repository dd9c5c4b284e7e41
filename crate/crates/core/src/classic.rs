//! Generalized weighted-sum query expansion and the classic weighting rules.
//!
//! Every method here builds the expanded query as the ℓ2-normalized sum
//! `Σ wᵢ dᵢ` over the query (`d₀ = q`) and its top-k neighbors. They differ
//! only in how the weights are chosen:
//!
//! | method   | weight                             |
//! |----------|------------------------------------|
//! | AQE      | `1`                                |
//! | AQEwD    | `(k − i) / k`                      |
//! | αQE      | `max(sim(q, dᵢ), 0)^α`             |
//! | DQE      | linear SVM dual solution           |

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{EmbeddingMatrix, NeighborList};
use crate::svm::{train_svm, SvmConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    None,
    Aqe,
    Aqewd,
    Dqe,
    AlphaQe,
    Lattqe,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Aqe => "aqe",
            Method::Aqewd => "aqewd",
            Method::Dqe => "dqe",
            Method::AlphaQe => "alpha-qe",
            Method::Lattqe => "lattqe",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "none" => Method::None,
            "aqe" => Method::Aqe,
            "aqewd" => Method::Aqewd,
            "dqe" => Method::Dqe,
            "alpha-qe" | "alphaqe" | "aqe-alpha" => Method::AlphaQe,
            "lattqe" => Method::Lattqe,
            other => return Err(Error::Config(format!("unknown expansion method `{other}`"))),
        })
    }
}

/// How the learned aggregator turns transformed similarities into weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    #[default]
    Similarity,
    TemperedSoftmax,
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(WeightMode::Similarity),
            "tempered-softmax" | "softmax" => Ok(WeightMode::TemperedSoftmax),
            other => Err(Error::Config(format!("unknown weight mode `{other}`"))),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Similarity => "similarity",
            WeightMode::TemperedSoftmax => "tempered-softmax",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QeConfig {
    pub method: Method,
    pub nqe: usize,
    pub alpha: f64,
    pub svm_c: f64,
    pub neg: usize,
    pub checkpoint: Option<PathBuf>,
    pub weight_mode: WeightMode,
    pub seed: u64,
}

impl Default for QeConfig {
    fn default() -> Self {
        Self {
            method: Method::None,
            nqe: 0,
            alpha: 3.0,
            svm_c: 0.1,
            neg: 5,
            checkpoint: None,
            weight_mode: WeightMode::Similarity,
            seed: 0,
        }
    }
}

impl QeConfig {
    pub fn new(method: Method, nqe: usize) -> Self {
        Self {
            method,
            nqe,
            ..Self::default()
        }
    }

    pub fn alpha(nqe: usize, alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::new(Method::AlphaQe, nqe)
        }
    }

    pub fn dqe(nqe: usize, c: f64, neg: usize) -> Self {
        Self {
            svm_c: c,
            neg,
            ..Self::new(Method::Dqe, nqe)
        }
    }

    /// Method and its hyper-parameters other than nQE, e.g. `alpha-qe[alpha=3]`.
    pub fn label(&self) -> String {
        match self.method {
            Method::AlphaQe => format!("alpha-qe[alpha={}]", self.alpha),
            Method::Dqe => format!("dqe[c={};neg={}]", self.svm_c, self.neg),
            m => m.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.method == Method::Dqe {
            if !(self.svm_c > 0.0) {
                return Err(Error::Config(format!("svm C must be positive, got {}", self.svm_c)));
            }
            if self.neg == 0 {
                return Err(Error::Config("dqe needs at least one negative".into()));
            }
        }
        if self.method == Method::Lattqe && self.checkpoint.is_none() {
            return Err(Error::Config("lattqe needs a checkpoint path".into()));
        }
        Ok(())
    }
}

/// Weights aligned with `[q, d₁, …, d_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(pub Vec<f32>);

impl WeightVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// True if `i > j ⇒ wᵢ ≤ wⱼ`.
    pub fn is_monotone_non_increasing(&self) -> bool {
        self.0.windows(2).all(|w| w[1] <= w[0])
    }
}

/// ℓ2-normalized `w₀ q + Σ wᵢ dᵢ`.
pub fn aggregate(q: &[f32], neighbors: &[&[f32]], weights: &WeightVector) -> Result<Vec<f32>> {
    if weights.len() != neighbors.len() + 1 {
        return Err(Error::Shape(format!(
            "{} weights for a query and {} neighbors",
            weights.len(),
            neighbors.len()
        )));
    }
    let dim = q.len();
    let mut sum = vec![0.0f64; dim];
    for (v, &w) in std::iter::once(q).chain(neighbors.iter().copied()).zip(&weights.0) {
        if v.len() != dim {
            return Err(Error::Shape(format!(
                "vector of dimension {} aggregated with dimension {dim}",
                v.len()
            )));
        }
        if w == 0.0 {
            continue;
        }
        for (s, &x) in sum.iter_mut().zip(v) {
            *s += w as f64 * x as f64;
        }
    }
    normalize_f64(&sum)
}

pub(crate) fn normalize_f64(v: &[f64]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("aggregated vector has norm {norm:e}")));
    }
    Ok(v.iter().map(|x| (x / norm) as f32).collect())
}

pub fn weights_aqe(k: usize) -> WeightVector {
    WeightVector(vec![1.0; k + 1])
}

/// `wᵢ = (k − i) / k`; with `k = 0` only the query remains.
pub fn weights_aqewd(k: usize) -> WeightVector {
    if k == 0 {
        return WeightVector(vec![1.0]);
    }
    WeightVector((0..=k).map(|i| (k - i) as f32 / k as f32).collect())
}

/// `wᵢ = sim(q, dᵢ)^α` with similarities clamped to `[0, 1]`; `w₀ = 1`.
pub fn weights_alpha(neighbor_similarities: &[f32], alpha: f64) -> WeightVector {
    let alpha = alpha as f32;
    let mut w = Vec::with_capacity(neighbor_similarities.len() + 1);
    w.push(1.0);
    w.extend(neighbor_similarities.iter().map(|&s| s.clamp(0.0, 1.0).powf(alpha)));
    WeightVector(w)
}

/// Expands `q` with one of the classic methods. Rows in `exclude` are never
/// used as neighbors or negatives.
pub fn expand_classic(q: &[f32], index: &EmbeddingMatrix, config: &QeConfig, exclude: &[usize]) -> Result<Vec<f32>> {
    config.validate()?;
    if config.method == Method::None {
        if q.len() != index.dim() {
            return Err(Error::Shape("query dimension differs from index".into()));
        }
        return Ok(q.to_vec());
    }
    let neighbors = index.knn(q, config.nqe, exclude)?;
    expand_with_neighbors(q, index, &neighbors, config, exclude)
}

/// Classic expansion given a precomputed neighbor list (already truncated to nQE).
pub fn expand_with_neighbors(
    q: &[f32],
    index: &EmbeddingMatrix,
    neighbors: &NeighborList,
    config: &QeConfig,
    exclude: &[usize],
) -> Result<Vec<f32>> {
    let vecs: Vec<&[f32]> = neighbors.entries.iter().map(|n| index.row(n.row)).collect();
    let k = vecs.len();
    let weights = match config.method {
        Method::None => return Ok(q.to_vec()),
        Method::Aqe => weights_aqe(k),
        Method::Aqewd => weights_aqewd(k),
        Method::AlphaQe => weights_alpha(&neighbors.similarities(), config.alpha),
        Method::Dqe => return expand_dqe(q, index, neighbors, config, exclude),
        Method::Lattqe => return Err(Error::InvalidArgument("lattqe expansion needs a loaded model".into())),
    };
    aggregate(q, &vecs, &weights)
}

fn expand_dqe(
    q: &[f32],
    index: &EmbeddingMatrix,
    neighbors: &NeighborList,
    config: &QeConfig,
    exclude: &[usize],
) -> Result<Vec<f32>> {
    let mut skip: Vec<usize> = exclude.to_vec();
    skip.extend(neighbors.rows());
    let negatives = index.bottom_k(q, config.neg, &skip)?;
    let pos: Vec<&[f32]> = std::iter::once(q)
        .chain(neighbors.entries.iter().map(|n| index.row(n.row)))
        .collect();
    let neg: Vec<&[f32]> = negatives.entries.iter().map(|n| index.row(n.row)).collect();
    let svm = SvmConfig {
        c: config.svm_c,
        seed: config.seed,
        ..SvmConfig::default()
    };
    let sol = train_svm(&pos, &neg, &svm)?;
    normalize_f64(&sol.weights)
}
