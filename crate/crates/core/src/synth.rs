//! Clustered unit-vector corpora for desk-scale experiments.
//!
//! Class centers are uniform on the sphere and members are
//! `normalize(center + σ·g)` with `g ~ N(0, I)`. Classes are split between
//! training, validation and test; validation and test classes contribute
//! queries, whose same-class items are their positives.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, Benchmark, Protocol, QueryAnnotation};
use crate::expand::Expander;
use crate::index::EmbeddingMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub items_per_class: (usize, usize),
    pub dim: usize,
    pub sigma: f64,
    /// Class-free items added to the validation and test databases.
    pub distractors: usize,
    /// Class-free items added to the training split.
    pub train_distractors: usize,
    /// Share of each validation/test class used as queries (at least one).
    pub query_fraction: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Share of each query's positives, closest first, labeled easy.
    pub easy_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 200,
            items_per_class: (5, 50),
            dim: 64,
            sigma: 0.1,
            distractors: 2000,
            train_distractors: 1000,
            query_fraction: 0.1,
            train_fraction: 0.5,
            val_fraction: 0.25,
            easy_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.items_per_class;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!("invalid items-per-class range [{lo}, {hi}]")));
        }
        if self.dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        let fracs = [
            self.query_fraction,
            self.train_fraction,
            self.val_fraction,
            self.easy_fraction,
        ];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || self.train_fraction + self.val_fraction > 1.0 {
            return Err(Error::Config("fractions must lie in [0, 1] and train + val ≤ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    ValQuery,
    Test,
    TestQuery,
    Distractor,
}

impl Split {
    pub fn is_query(self) -> bool {
        matches!(self, Split::ValQuery | Split::TestQuery)
    }
}

/// One metadata record per embedding row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub row: usize,
    pub id: String,
    pub class: Option<u32>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub embeddings: EmbeddingMatrix,
    pub metadata: Vec<ItemMeta>,
    pub val_annotations: Vec<QueryAnnotation>,
    pub test_annotations: Vec<QueryAnnotation>,
}

pub fn item_id(row: usize) -> String {
    format!("x{row:06}")
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn to_unit_f32(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

pub fn generate_corpus(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let (lo, hi) = config.items_per_class;

    let mut order: Vec<usize> = (0..config.classes).collect();
    order.shuffle(&mut rng);
    let n_train = (config.classes as f64 * config.train_fraction).round() as usize;
    let n_val = ((config.classes as f64 * config.val_fraction).round() as usize).min(config.classes - n_train);
    let mut stage_of = vec![Split::Train; config.classes];
    for &c in &order[n_train..n_train + n_val] {
        stage_of[c] = Split::Val;
    }
    for &c in &order[n_train + n_val..] {
        stage_of[c] = Split::Test;
    }

    let mut data: Vec<f32> = Vec::new();
    let mut metadata = Vec::new();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.classes];
    for class in 0..config.classes {
        let center = unit_gaussian(&mut rng, d);
        let count = rng.random_range(lo..=hi);
        let queries = match stage_of[class] {
            Split::Train => 0,
            _ => ((count as f64 * config.query_fraction).ceil() as usize).clamp(1, count),
        };
        for i in 0..count {
            let v: Vec<f64> = center
                .iter()
                .map(|&c| c + config.sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let row = metadata.len();
            data.extend(to_unit_f32(&v));
            let split = match (stage_of[class], i < queries) {
                (Split::Val, true) => Split::ValQuery,
                (Split::Test, true) => Split::TestQuery,
                (s, _) => s,
            };
            members[class].push(row);
            metadata.push(ItemMeta {
                row,
                id: item_id(row),
                class: Some(class as u32),
                split,
            });
        }
    }
    for (n, split) in [
        (config.train_distractors, Split::Train),
        (config.distractors, Split::Distractor),
    ] {
        for _ in 0..n {
            let row = metadata.len();
            data.extend(to_unit_f32(&unit_gaussian(&mut rng, d)));
            metadata.push(ItemMeta {
                row,
                id: item_id(row),
                class: None,
                split,
            });
        }
    }
    let ids = metadata.iter().map(|m| m.id.clone()).collect();
    let embeddings = EmbeddingMatrix::new(d, data, ids)?;

    let mut val_annotations = Vec::new();
    let mut test_annotations = Vec::new();
    for m in metadata.iter().filter(|m| m.split.is_query()) {
        let class = m.class.expect("queries have a class") as usize;
        let q = embeddings.row(m.row);
        let mut positives: Vec<(f32, usize)> = members[class]
            .iter()
            .filter(|&&r| !metadata[r].split.is_query())
            .map(|&r| (crate::tensor::dot(q, embeddings.row(r)), r))
            .collect();
        positives.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let n_easy = (positives.len() as f64 * config.easy_fraction).floor() as usize;
        let ann = QueryAnnotation {
            id: m.id.clone(),
            easy: positives[..n_easy].iter().map(|&(_, r)| item_id(r)).collect(),
            hard: positives[n_easy..].iter().map(|&(_, r)| item_id(r)).collect(),
            junk: Vec::new(),
        };
        if m.split == Split::ValQuery {
            val_annotations.push(ann);
        } else {
            test_annotations.push(ann);
        }
    }
    Ok(Corpus {
        embeddings,
        metadata,
        val_annotations,
        test_annotations,
    })
}

impl Corpus {
    pub fn rows_where(&self, pred: impl Fn(&ItemMeta) -> bool) -> Vec<usize> {
        self.metadata.iter().filter(|m| pred(m)).map(|m| m.row).collect()
    }

    /// Training rows and their labels (`None` for distractors).
    pub fn train_split(&self) -> Result<(EmbeddingMatrix, Vec<Option<u32>>)> {
        let rows = self.rows_where(|m| m.split == Split::Train);
        let labels = rows.iter().map(|&r| self.metadata[r].class).collect();
        Ok((self.embeddings.select(&rows)?, labels))
    }

    /// Queries of one stage searched against that stage's items plus the
    /// shared distractors.
    pub fn benchmark(&self, stage: Stage) -> Result<Benchmark> {
        let (db_split, q_split, anns, name) = match stage {
            Stage::Val => (Split::Val, Split::ValQuery, &self.val_annotations, "synth-val"),
            Stage::Test => (Split::Test, Split::TestQuery, &self.test_annotations, "synth-test"),
        };
        let db_rows = self.rows_where(|m| m.split == db_split || m.split == Split::Distractor);
        let q_rows = self.rows_where(|m| m.split == q_split);
        Benchmark::new(
            name,
            self.embeddings.select(&db_rows)?,
            self.embeddings.select(&q_rows)?,
            anns,
        )
    }
}

/// No-expansion mean mAP of the validation benchmark.
pub fn baseline_val_map(config: &SynthConfig) -> Result<f64> {
    let corpus = generate_corpus(config)?;
    let bench = corpus.benchmark(Stage::Val)?;
    Ok(evaluate(&bench, &Expander::none(), &Protocol::reported(), 0)?.mean_map)
}

/// Bisects σ so that the no-expansion validation mAP lands near `target`.
/// Returns every probed `(σ, mAP)` pair; the last one is the pick.
pub fn calibrate_sigma(config: &SynthConfig, target: f64, range: (f64, f64), steps: usize) -> Result<Vec<(f64, f64)>> {
    let (mut lo, mut hi) = range;
    let mut probes = Vec::with_capacity(steps);
    for _ in 0..steps {
        let sigma = 0.5 * (lo + hi);
        let map = baseline_val_map(&SynthConfig {
            sigma,
            ..config.clone()
        })?;
        probes.push((sigma, map));
        // mAP falls as σ grows
        if map > target {
            lo = sigma;
        } else {
            hi = sigma;
        }
    }
    Ok(probes)
}
