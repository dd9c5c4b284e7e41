//! Discriminative training of the attention model.
//!
//! Each sample expands a training item with a randomly thinned neighbor list,
//! pulls the expansion towards a same-class positive and pushes it away from
//! hard negatives mined in a pool. An auxiliary head predicts which
//! neighbors are relevant.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, Tape, Var};
use crate::classic::WeightMode;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Benchmark, Protocol};
use crate::expand::Expander;
use crate::index::EmbeddingMatrix;
use crate::lattqe::LAttQe;
use crate::optim::{exponential_lr, Adam};
use crate::tensor::{dot, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub pool_size: usize,
    pub pool_refresh: usize,
    pub neighbors: (usize, usize),
    pub max_drop: f64,
    pub aux_weight: f64,
    pub epochs: usize,
    /// Neighbor count used when scoring the validation benchmark.
    pub val_nqe: usize,
    /// Learning rate of the temperature phase.
    pub temperature_lr: f64,
    pub temperature_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            lr: 1e-4,
            lr_decay: 0.99,
            weight_decay: 1e-6,
            batch_size: 64,
            negatives: 5,
            pool_size: 20_000,
            pool_refresh: 2000,
            neighbors: (32, 64),
            max_drop: 0.6,
            aux_weight: 1.0,
            epochs: 100,
            val_nqe: 64,
            temperature_lr: 1e-2,
            temperature_epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, kmax: usize) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        let (lo, hi) = self.neighbors;
        if lo > hi || hi > kmax {
            return Err(Error::Config(format!(
                "neighbor range [{lo}, {hi}] must be ordered and within the model capacity {kmax}"
            )));
        }
        if self.val_nqe > kmax {
            return Err(Error::Config(format!(
                "validation nqe {} exceeds capacity {kmax}",
                self.val_nqe
            )));
        }
        if self.batch_size == 0 || self.pool_refresh == 0 || self.pool_size == 0 {
            return Err(Error::Config(
                "batch size, pool size and refresh interval must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.max_drop) {
            return Err(Error::Config(format!(
                "drop probability bound {} outside [0, 1]",
                self.max_drop
            )));
        }
        Ok(())
    }
}

/// Labeled training items with precomputed neighbor lists.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub embeddings: EmbeddingMatrix,
    /// `None` marks an item without a class (never a positive).
    pub labels: Vec<Option<u32>>,
    neighbors: Vec<Vec<usize>>,
    members: HashMap<u32, Vec<usize>>,
    queries: Vec<usize>,
}

impl TrainSet {
    /// Precomputes the `max_neighbors` nearest rows of every item, itself excluded.
    pub fn new(embeddings: EmbeddingMatrix, labels: Vec<Option<u32>>, max_neighbors: usize) -> Result<Self> {
        if labels.len() != embeddings.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} items",
                labels.len(),
                embeddings.len()
            )));
        }
        let mut members: HashMap<u32, Vec<usize>> = HashMap::new();
        for (row, l) in labels.iter().enumerate() {
            if let Some(c) = l {
                members.entry(*c).or_default().push(row);
            }
        }
        let queries: Vec<usize> = (0..labels.len())
            .filter(|&r| labels[r].is_some_and(|c| members[&c].len() > 1))
            .collect();
        if queries.is_empty() {
            return Err(Error::Config("training set has no class with two or more items".into()));
        }
        let neighbors = (0..embeddings.len())
            .into_par_iter()
            .map(|r| embeddings.knn(embeddings.row(r), max_neighbors, &[r]).map(|n| n.rows()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embeddings,
            labels,
            neighbors,
            members,
            queries,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows usable as training queries (classes with at least two items).
    pub fn queries(&self) -> &[usize] {
        &self.queries
    }

    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.neighbors[row]
    }

    fn same_class(&self, a: usize, b: usize) -> bool {
        matches!((self.labels[a], self.labels[b]), (Some(x), Some(y)) if x == y)
    }
}

/// Thinned neighbor list; `positions[0] = 0` is the query slot and each
/// surviving neighbor keeps its original rank slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSample {
    pub rows: Vec<usize>,
    pub positions: Vec<usize>,
}

/// Top-n neighbors with `n` uniform in the configured range, each dropped
/// with a per-query probability drawn from `[0, max_drop)`.
pub fn sample_neighbors<R: Rng>(set: &TrainSet, query: usize, rng: &mut R, config: &TrainConfig) -> NeighborSample {
    let p = if config.max_drop > 0.0 {
        rng.random_range(0.0..config.max_drop)
    } else {
        0.0
    };
    sample_neighbors_with_drop(set, query, rng, config, p)
}

/// [`sample_neighbors`] with a fixed drop probability.
pub fn sample_neighbors_with_drop<R: Rng>(
    set: &TrainSet,
    query: usize,
    rng: &mut R,
    config: &TrainConfig,
    drop: f64,
) -> NeighborSample {
    let (lo, hi) = config.neighbors;
    let n = rng.random_range(lo..=hi).min(set.neighbors[query].len());
    let mut rows = Vec::with_capacity(n);
    let mut positions = vec![0];
    for (rank, &r) in set.neighbors[query][..n].iter().enumerate() {
        if drop > 0.0 && rng.random::<f64>() < drop {
            continue;
        }
        rows.push(r);
        positions.push(rank + 1);
    }
    NeighborSample { rows, positions }
}

/// The `count` pool items most similar to `q` whose class differs from
/// `query_class`, keeping at most one item per class. Items without a class
/// are each treated as a class of their own.
pub fn mine_negatives(
    q: &[f32],
    pool: &[usize],
    embeddings: &EmbeddingMatrix,
    labels: &[Option<u32>],
    query_class: Option<u32>,
    count: usize,
) -> Vec<usize> {
    let mut scored: Vec<(f32, usize)> = pool
        .iter()
        .filter(|&&r| labels[r].is_none() || labels[r] != query_class)
        .map(|&r| (dot(q, embeddings.row(r)), r))
        .collect();
    let order = |a: &(f32, usize), b: &(f32, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    // Most pools hold enough distinct classes near the top; widen to a full
    // sort only when the shortlist runs dry.
    let shortlist = (count * 8).max(64);
    if shortlist < scored.len() {
        scored.select_nth_unstable_by(shortlist - 1, order);
        let mut head = scored[..shortlist].to_vec();
        head.sort_unstable_by(order);
        let out = distinct_classes(&head, labels, count);
        if out.len() == count {
            return out;
        }
    }
    scored.sort_unstable_by(order);
    distinct_classes(&scored, labels, count)
}

fn distinct_classes(sorted: &[(f32, usize)], labels: &[Option<u32>], count: usize) -> Vec<usize> {
    let mut used = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    for &(_, r) in sorted {
        if out.len() == count {
            break;
        }
        if let Some(c) = labels[r] {
            if !used.insert(c) {
                continue;
            }
        }
        out.push(r);
    }
    out
}

/// `y z² + (1 − y) max(0, m − z)²` with `z = ‖q − d‖`.
pub fn contrastive_loss(q: &[f32], d: &[f32], relevant: bool, margin: f64) -> f64 {
    let z = q
        .iter()
        .zip(d)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if relevant {
        z * z
    } else {
        (margin - z).max(0.0).powi(2)
    }
}

fn contrastive_var<F: Scalar>(tape: &mut Tape<F>, q: Var, d: &[f32], relevant: bool, margin: f64) -> Result<Var> {
    let dv = tape.input(Tensor::new(vec![1, d.len()], to_scalar(d))?);
    let diff = tape.sub(q, dv)?;
    let z = tape.norm(diff);
    if relevant {
        Ok(tape.square(z))
    } else {
        let neg = tape.scale(z, -F::one());
        let gap = tape.add_const(neg, F::from_f64(margin));
        let hinge = tape.relu(gap);
        Ok(tape.square(hinge))
    }
}

fn to_scalar<F: Scalar>(v: &[f32]) -> Vec<F> {
    v.iter().map(|&x| F::from_f64(x as f64)).collect()
}

/// Everything one loss evaluation needs. `negatives` is filled by mining
/// when the sample is built with an empty list and a pool is supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub query: usize,
    pub neighbors: NeighborSample,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl TrainingSample {
    /// Auxiliary labels: the query slot is relevant, neighbors by class.
    pub fn relevance(&self, set: &TrainSet) -> Vec<f32> {
        std::iter::once(1.0)
            .chain(
                self.neighbors
                    .rows
                    .iter()
                    .map(|&r| if set.same_class(self.query, r) { 1.0 } else { 0.0 }),
            )
            .collect()
    }
}

/// Records the loss of one sample. With `pool` present the negatives are
/// mined against the current expansion and stored in `sample`.
pub fn sample_loss<F: Scalar>(
    tape: &mut Tape<F>,
    model: &LAttQe<F>,
    set: &TrainSet,
    sample: &mut TrainingSample,
    pool: Option<&[usize]>,
    config: &TrainConfig,
    mode: WeightMode,
) -> Result<Var> {
    let q = to_scalar::<F>(set.embeddings.row(sample.query));
    let rows: Vec<Vec<F>> = sample
        .neighbors
        .rows
        .iter()
        .map(|&r| to_scalar(set.embeddings.row(r)))
        .collect();
    let refs: Vec<&[F]> = rows.iter().map(Vec::as_slice).collect();
    let vars = model.forward(tape, &q, &refs, &sample.neighbors.positions, mode)?;
    if let Some(pool) = pool {
        let expanded: Vec<f32> = tape
            .value(vars.expanded)
            .data()
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        sample.negatives = mine_negatives(
            &expanded,
            pool,
            &set.embeddings,
            &set.labels,
            set.labels[sample.query],
            config.negatives,
        );
    }
    let mut loss = contrastive_var(
        tape,
        vars.expanded,
        set.embeddings.row(sample.positive),
        true,
        config.margin,
    )?;
    for &n in &sample.negatives {
        let term = contrastive_var(tape, vars.expanded, set.embeddings.row(n), false, config.margin)?;
        loss = tape.add(loss, term)?;
    }
    if let (Some(logits), true) = (vars.aux_logits, config.aux_weight != 0.0) {
        let labels: Vec<F> = sample
            .relevance(set)
            .into_iter()
            .map(|v| F::from_f64(v as f64))
            .collect();
        let bce = tape.bce_with_logits(logits, &labels)?;
        let bce = tape.scale(bce, F::from_f64(config.aux_weight));
        loss = tape.add(loss, bce)?;
    }
    Ok(loss)
}

/// Random pool of training rows, redrawn every `refresh` updates.
#[derive(Clone, Debug)]
pub struct PoolSchedule {
    size: usize,
    refresh: usize,
    since_refresh: usize,
    refreshes: usize,
    rows: Vec<usize>,
}

impl PoolSchedule {
    pub fn new<R: Rng>(n_items: usize, size: usize, refresh: usize, rng: &mut R) -> Self {
        let mut p = Self {
            size: size.min(n_items),
            refresh,
            since_refresh: 0,
            refreshes: 0,
            rows: Vec::new(),
        };
        p.draw(n_items, rng);
        p
    }

    fn draw<R: Rng>(&mut self, n_items: usize, rng: &mut R) {
        let mut rows: Vec<usize> = rand::seq::index::sample(rng, n_items, self.size).into_vec();
        rows.sort_unstable();
        self.rows = rows;
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Number of redraws after the initial one.
    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    /// Counts one update; redraws once `refresh` updates have accumulated.
    pub fn tick<R: Rng>(&mut self, n_items: usize, rng: &mut R) -> bool {
        self.since_refresh += 1;
        if self.since_refresh == self.refresh {
            self.since_refresh = 0;
            self.refreshes += 1;
            self.draw(n_items, rng);
            true
        } else {
            false
        }
    }
}

fn pick_positive<R: Rng>(set: &TrainSet, query: usize, pool: &[usize], rng: &mut R) -> usize {
    let in_pool: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&r| r != query && set.same_class(query, r))
        .collect();
    if let Some(&p) = in_pool.choose(rng) {
        return p;
    }
    let class = set.labels[query].expect("training queries are labeled");
    let all: Vec<usize> = set.members[&class].iter().copied().filter(|&r| r != query).collect();
    *all.choose(rng).expect("training queries have a same-class item")
}

/// Draws the random parts of a sample (negatives are mined later).
pub fn draw_sample<R: Rng>(
    set: &TrainSet,
    query: usize,
    pool: &[usize],
    rng: &mut R,
    config: &TrainConfig,
) -> TrainingSample {
    let neighbors = sample_neighbors(set, query, rng, config);
    let positive = pick_positive(set, query, pool, rng);
    TrainingSample {
        query,
        neighbors,
        positive,
        negatives: Vec::new(),
    }
}

type SampleGradients = (f64, Vec<(ParamId, Tensor<f32>)>);

/// Loss and parameter gradients of each sample, computed independently and
/// returned in input order.
fn batch_gradients(
    model: &LAttQe<f32>,
    set: &TrainSet,
    batch: &mut [TrainingSample],
    pool: &[usize],
    config: &TrainConfig,
    mode: WeightMode,
) -> Result<Vec<SampleGradients>> {
    batch
        .par_iter_mut()
        .map(|sample| {
            let mut tape = Tape::new();
            let loss = sample_loss(&mut tape, model, set, sample, Some(pool), config, mode)?;
            let value = tape.value(loss).item() as f64;
            let grads = tape.gradients(loss)?;
            Ok((value, tape.param_gradients(grads)))
        })
        .collect()
}

/// One optimizer update over a batch. Returns the summed loss.
pub fn train_step(
    model: &mut LAttQe<f32>,
    adam: &mut Adam<f32>,
    set: &TrainSet,
    batch: &mut [TrainingSample],
    pool: &[usize],
    config: &TrainConfig,
    lr: f64,
    mode: WeightMode,
) -> Result<f64> {
    let results = batch_gradients(model, set, batch, pool, config, mode)?;
    let store = model.params_mut();
    store.zero_grad();
    let mut total = 0.0;
    for (loss, grads) in results {
        total += loss;
        for (id, g) in grads {
            let p = store.get_mut(id);
            if p.trainable {
                p.grad.add_assign(&g);
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {total} over a batch of {}",
            batch.len()
        )));
    }
    adam.step(store, lr, config.weight_decay);
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub update: usize,
    pub loss: f64,
    pub val_map: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: LAttQe<f32>,
    pub initial_val_map: f64,
    /// One record per epoch; `val_map` is scored after the epoch.
    pub curve: Vec<EpochRecord>,
    /// 1-based epoch of the returned model, `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

pub fn validation_map(model: &LAttQe<f32>, val: &Benchmark, nqe: usize, mode: WeightMode) -> Result<f64> {
    let e = Expander::learned(Arc::new(model.clone()), nqe, mode)?;
    Ok(evaluate(val, &e, &Protocol::reported(), 0)?.mean_map)
}

fn run_epochs(
    mut model: LAttQe<f32>,
    set: &TrainSet,
    val: &Benchmark,
    config: &TrainConfig,
    epochs: usize,
    lr0: f64,
    mode: WeightMode,
    mut log: Option<&mut dyn Write>,
) -> Result<FitOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.params());
    let mut pool = PoolSchedule::new(set.len(), config.pool_size, config.pool_refresh, &mut rng);
    let initial_val_map = validation_map(&model, val, config.val_nqe, mode)?;
    let mut best = (initial_val_map, None, model.clone());
    let mut curve = Vec::with_capacity(epochs);
    let mut updates = 0usize;
    let start = Instant::now();
    for epoch in 0..epochs {
        let lr = exponential_lr(lr0, config.lr_decay, epoch);
        let mut order = set.queries().to_vec();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut batch: Vec<TrainingSample> = chunk
                .iter()
                .map(|&q| draw_sample(set, q, pool.rows(), &mut rng, config))
                .collect();
            let loss = train_step(&mut model, &mut adam, set, &mut batch, pool.rows(), config, lr, mode).map_err(
                |e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {}, update {updates}: {msg}", epoch + 1)),
                    other => other,
                },
            )?;
            epoch_loss += loss;
            updates += 1;
            pool.tick(set.len(), &mut rng);
        }
        let val_map = validation_map(&model, val, config.val_nqe, mode)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            update: updates,
            loss: epoch_loss / set.queries().len() as f64,
            val_map,
            lr,
            wall_ms: start.elapsed().as_millis(),
        };
        log::info!(
            "epoch {} loss {:.5} val mAP {:.4} lr {:.2e}",
            record.epoch,
            record.loss,
            record.val_map,
            record.lr
        );
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        if best.1.is_none() || val_map > best.0 {
            best = (val_map, Some(epoch + 1), model.clone());
        }
        curve.push(record);
    }
    Ok(FitOutcome {
        model: best.2,
        initial_val_map,
        curve,
        best_epoch: best.1,
    })
}

/// Trains in similarity mode and returns the epoch with the highest
/// validation mAP (earliest on ties).
pub fn fit(
    model: LAttQe<f32>,
    set: &TrainSet,
    val: &Benchmark,
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<FitOutcome> {
    config.validate(model.config().kmax)?;
    if set.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut model = model;
    model.params_mut().set_all_trainable(true);
    let t = model.log_temperature_id();
    model.params_mut().get_mut(t).trainable = false;
    let mut out = run_epochs(
        model,
        set,
        val,
        config,
        config.epochs,
        config.lr,
        WeightMode::Similarity,
        log,
    )?;
    out.model.params_mut().set_all_trainable(true);
    Ok(out)
}

/// Freezes everything but the temperature and continues training with
/// tempered-softmax weights. The returned model has its weight mode set to
/// tempered softmax.
pub fn fit_dba_temperature(
    model: LAttQe<f32>,
    set: &TrainSet,
    val: &Benchmark,
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<FitOutcome> {
    config.validate(model.config().kmax)?;
    let mut model = model;
    model.params_mut().set_all_trainable(false);
    let t = model.log_temperature_id();
    model.params_mut().get_mut(t).trainable = true;
    model.config_mut().weight_mode = WeightMode::TemperedSoftmax;
    let mut out = run_epochs(
        model,
        set,
        val,
        config,
        config.temperature_epochs,
        config.temperature_lr,
        WeightMode::TemperedSoftmax,
        log,
    )?;
    out.model.params_mut().set_all_trainable(true);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_fixtures() {
        let q = [1.0f32, 0.0];
        assert!((contrastive_loss(&q, &[0.8, 0.0], true, 0.1) - 0.04).abs() < 1e-7);
        assert_eq!(contrastive_loss(&q, &[0.85, 0.0], false, 0.1), 0.0);
        assert!((contrastive_loss(&q, &[0.95, 0.0], false, 0.1) - 0.0025).abs() < 1e-7);
    }

    #[test]
    fn pool_refreshes_on_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pool = PoolSchedule::new(50, 20, 2000, &mut rng);
        assert_eq!(pool.rows().len(), 20);
        for _ in 0..4999 {
            pool.tick(50, &mut rng);
        }
        assert_eq!(pool.refreshes(), 2);
        assert!(!pool.tick(50, &mut rng));
        assert!(PoolSchedule::new(5, 20, 1, &mut rng).rows().len() == 5);
    }

    #[test]
    fn mining_skips_same_class_and_repeats() {
        let e = EmbeddingMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.9, 0.1],
        ])
        .unwrap();
        let labels = [Some(0), Some(1), Some(2), Some(1)];
        let got = mine_negatives(&[0.0, 1.0, 0.0], &[0, 1, 2, 3], &e, &labels, Some(0), 5);
        assert_eq!(got, vec![1, 2]);
        assert!(mine_negatives(&[1.0, 0.0, 0.0], &[0], &e, &labels, Some(0), 5).is_empty());
    }
}
