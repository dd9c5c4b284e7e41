//! Query expansion for embedding retrieval.
//!
//! Classic aggregators (AQE, AQEwD, αQE, DQE) and a learnable attention
//! aggregator (LAttQE) over an exact cosine index, database-side
//! augmentation, training, and revisited-protocol evaluation. Everything
//! runs on CPU with a small reverse-mode autodiff engine.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autograd;
pub mod classic;
pub mod dba;
pub mod error;
pub mod eval;
pub mod expand;
pub mod index;
pub mod io;
pub mod lattqe;
pub mod nn;
pub mod optim;
pub mod svm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use classic::{Method, QeConfig, WeightMode, WeightVector};
pub use error::{Error, FormatError, Result};
pub use eval::{Benchmark, EvalReport, Protocol, QueryAnnotation};
pub use expand::Expander;
pub use index::{EmbeddingMatrix, Neighbor, NeighborList};
pub use lattqe::{LAttQe, LAttQeConfig};
pub use synth::{Corpus, ItemMeta, Split, Stage, SynthConfig};
pub use tensor::Tensor;
pub use train::{FitOutcome, TrainConfig, TrainSet};
