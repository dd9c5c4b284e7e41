//! Learned attention-based query expansion.
//!
//! The query and its neighbors receive rank-dependent positional embeddings,
//! pass through a stack of post-norm encoder layers, and the cosine between
//! the transformed query and each transformed item becomes that item's
//! weight in the expansion. Weights are applied to the original vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::classic::{aggregate, WeightMode, WeightVector};
use crate::error::{Error, Result};
use crate::nn::EncoderLayer;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LAttQeConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub kmax: usize,
    pub use_positional_encoding: bool,
    pub position_only: bool,
    pub use_self_attention: bool,
    pub use_aux_head: bool,
    pub weight_mode: WeightMode,
}

impl Default for LAttQeConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 8,
            kmax: 64,
            use_positional_encoding: true,
            position_only: false,
            use_self_attention: true,
            use_aux_head: true,
            weight_mode: WeightMode::Similarity,
        }
    }
}

impl LAttQeConfig {
    /// D = 2048, three layers of 64 heads.
    pub fn full_scale() -> Self {
        Self {
            dim: 2048,
            layers: 3,
            heads: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("model dimension must be positive".into()));
        }
        if self.use_self_attention && (self.heads == 0 || !self.dim.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "embedding dimension {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.position_only && !self.use_positional_encoding {
            return Err(Error::Config(
                "position-only weights need positional encoding enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder outputs for `[q, d₁, …, d_k]`; row 0 is the transformed query.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedSet<F> {
    pub vectors: Tensor<F>,
}

impl<F: Scalar> TransformedSet<F> {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn query(&self) -> &[F] {
        self.vectors.row(0)
    }
}

/// Variables produced by one recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub inputs: Var,
    pub transformed: Var,
    /// `1 × (k+1)` weights.
    pub weights: Var,
    /// `1 × D` unit-norm expanded query.
    pub expanded: Var,
    /// `(k+1) × 1`, present when the auxiliary head is enabled.
    pub aux_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct LAttQe<F = f32> {
    config: LAttQeConfig,
    store: ParamStore<F>,
    layers: Vec<EncoderLayer>,
    positional: ParamId,
    aux_weight: ParamId,
    aux_bias: ParamId,
    log_temperature: ParamId,
}

impl<F: Scalar> LAttQe<F> {
    pub fn new(config: LAttQeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(EncoderLayer::new(
                &mut store,
                &mut rng,
                &format!("encoder.{l}"),
                d,
                config.heads,
                config.use_self_attention,
            )?);
        }
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let pe: Vec<F> = (0..(config.kmax + 1) * d)
            .map(|_| F::from_f64(normal.sample(&mut rng)))
            .collect();
        let positional = store.add("positional", Tensor::new(vec![config.kmax + 1, d], pe)?);
        let aux_weight = store.add("aux.weight", crate::nn::glorot(&mut rng, d, 1));
        let aux_bias = store.add("aux.bias", Tensor::zeros(&[1]));
        let log_temperature = store.add("log_temperature", Tensor::scalar(F::zero()));
        Ok(Self {
            config,
            store,
            layers,
            positional,
            aux_weight,
            aux_bias,
            log_temperature,
        })
    }

    /// Model with the given config whose parameters are replaced by `values`
    /// (matched by name and shape).
    pub fn from_parameters(config: LAttQeConfig, values: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if values.len() != model.store.len() {
            return Err(Error::Data(format!(
                "model expects {} parameters, got {}",
                model.store.len(),
                values.len()
            )));
        }
        for (name, value) in values {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Data(format!("unexpected parameter `{name}`")))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &LAttQeConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut LAttQeConfig {
        &mut self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn positional_id(&self) -> ParamId {
        self.positional
    }

    pub fn aux_ids(&self) -> (ParamId, ParamId) {
        (self.aux_weight, self.aux_bias)
    }

    pub fn log_temperature_id(&self) -> ParamId {
        self.log_temperature
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    pub fn temperature(&self) -> f64 {
        self.store.value(self.log_temperature).item().as_f64().exp()
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
        }
        self.store.get_mut(self.log_temperature).value = Tensor::scalar(F::from_f64(t.ln()));
        Ok(())
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<G: Scalar>(&self) -> LAttQe<G> {
        LAttQe {
            config: self.config.clone(),
            store: self.store.cast(),
            layers: self.layers.clone(),
            positional: self.positional,
            aux_weight: self.aux_weight,
            aux_bias: self.aux_bias,
            log_temperature: self.log_temperature,
        }
    }

    fn check_positions(&self, positions: &[usize]) -> Result<()> {
        if let Some(&p) = positions.iter().max() {
            if p > self.config.kmax {
                return Err(Error::Capacity(format!(
                    "rank position {p} exceeds the model capacity of {} neighbors",
                    self.config.kmax
                )));
            }
        }
        Ok(())
    }

    fn stack(&self, q: &[F], neighbors: &[&[F]]) -> Result<Tensor<F>> {
        let d = self.config.dim;
        let mut data = Vec::with_capacity((neighbors.len() + 1) * d);
        for v in std::iter::once(q).chain(neighbors.iter().copied()) {
            if v.len() != d {
                return Err(Error::Shape(format!(
                    "model expects dimension {d}, got a vector of dimension {}",
                    v.len()
                )));
            }
            data.extend_from_slice(v);
        }
        Tensor::new(vec![neighbors.len() + 1, d], data)
    }

    /// Records the full expansion for `[q, d₁, …, d_k]` on `tape`.
    /// `positions[i]` is the rank slot of row `i` (0 for the query).
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        q: &[F],
        neighbors: &[&[F]],
        positions: &[usize],
        mode: WeightMode,
    ) -> Result<ForwardVars> {
        if positions.len() != neighbors.len() + 1 {
            return Err(Error::Shape(format!(
                "{} positions for {} rows",
                positions.len(),
                neighbors.len() + 1
            )));
        }
        self.check_positions(positions)?;
        let inputs = tape.input(self.stack(q, neighbors)?);
        let transformed = self.encode_vars(tape, inputs, positions)?;
        let weights = self.weight_vars(tape, transformed, mode)?;
        let summed = tape.matmul(weights, inputs)?;
        let expanded = tape.normalize_rows(summed)?;
        let aux_logits = if self.config.use_aux_head {
            let a = tape.param(&self.store, self.aux_weight);
            let b = tape.param(&self.store, self.aux_bias);
            Some(tape.linear(transformed, a, b)?)
        } else {
            None
        };
        Ok(ForwardVars {
            inputs,
            transformed,
            weights,
            expanded,
            aux_logits,
        })
    }

    fn encode_vars(&self, tape: &mut Tape<F>, inputs: Var, positions: &[usize]) -> Result<Var> {
        let mut h = if self.config.use_positional_encoding {
            let table = tape.param(&self.store, self.positional);
            let pe = tape.gather_rows(table, positions)?;
            if self.config.position_only {
                pe
            } else {
                tape.add(inputs, pe)?
            }
        } else {
            inputs
        };
        for layer in &self.layers {
            h = layer.forward(tape, &self.store, h)?;
        }
        Ok(h)
    }

    fn weight_vars(&self, tape: &mut Tape<F>, transformed: Var, mode: WeightMode) -> Result<Var> {
        let unit = tape.normalize_rows(transformed)?;
        let query = tape.gather_rows(unit, &[0])?;
        let cosines = tape.matmul_t(query, unit)?;
        match mode {
            WeightMode::Similarity => Ok(cosines),
            WeightMode::TemperedSoftmax => {
                let log_t = tape.param(&self.store, self.log_temperature);
                let neg = tape.scale(log_t, -F::one());
                let inv_t = tape.exp(neg);
                let scaled = tape.mul_scalar(cosines, inv_t)?;
                tape.softmax_rows(scaled)
            }
        }
    }

    /// `input_i + p_{positions[i]}` for every row; a copy of `inputs` when the
    /// positional encoding is disabled.
    pub fn positional_encode(&self, inputs: &Tensor<F>, positions: &[usize]) -> Result<Tensor<F>> {
        if positions.len() != inputs.rows() {
            return Err(Error::Shape(format!(
                "{} positions for {} rows",
                positions.len(),
                inputs.rows()
            )));
        }
        self.check_positions(positions)?;
        if !self.config.use_positional_encoding {
            return Ok(inputs.clone());
        }
        let table = self.store.value(self.positional);
        let mut out = inputs.clone();
        let d = self.config.dim;
        for (r, &p) in positions.iter().enumerate() {
            for (o, &e) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(table.row(p)) {
                *o += e;
            }
        }
        Ok(out)
    }

    /// Encoder stack applied to `[q, d₁, …, d_k]` in rank order.
    pub fn encode(&self, q: &[F], neighbors: &[&[F]]) -> Result<TransformedSet<F>> {
        let positions: Vec<usize> = (0..=neighbors.len()).collect();
        self.check_positions(&positions)?;
        let mut tape = Tape::new();
        let inputs = tape.input(self.stack(q, neighbors)?);
        let out = self.encode_vars(&mut tape, inputs, &positions)?;
        Ok(TransformedSet {
            vectors: tape.value(out).clone(),
        })
    }

    pub fn attention_weights(&self, t: &TransformedSet<F>, mode: WeightMode) -> Result<WeightVector> {
        let mut tape = Tape::new();
        let x = tape.input(t.vectors.clone());
        let w = self.weight_vars(&mut tape, x, mode)?;
        Ok(WeightVector(
            tape.value(w).data().iter().map(|v| v.as_f64() as f32).collect(),
        ))
    }

    pub fn aux_logits(&self, t: &TransformedSet<F>) -> Result<Vec<F>> {
        if !self.config.use_aux_head {
            return Err(Error::InvalidArgument("auxiliary head is disabled".into()));
        }
        let a = self.store.value(self.aux_weight).data();
        let b = self.store.value(self.aux_bias).item();
        Ok((0..t.len())
            .map(|i| crate::tensor::dot(t.vectors.row(i), a) + b)
            .collect())
    }

    /// Weights for `[q, d₁, …, d_k]` under the model's configured mode.
    pub fn weights(&self, q: &[F], neighbors: &[&[F]]) -> Result<WeightVector> {
        let t = self.encode(q, neighbors)?;
        self.attention_weights(&t, self.config.weight_mode)
    }
}

impl LAttQe<f32> {
    /// Expanded query built from the original vectors with learned weights.
    pub fn expand(&self, q: &[f32], neighbors: &[&[f32]]) -> Result<Vec<f32>> {
        self.expand_with_mode(q, neighbors, self.config.weight_mode)
    }

    pub fn expand_with_mode(&self, q: &[f32], neighbors: &[&[f32]], mode: WeightMode) -> Result<Vec<f32>> {
        if neighbors.is_empty() {
            return aggregate(q, &[], &WeightVector(vec![1.0]));
        }
        let t = self.encode(q, neighbors)?;
        let w = self.attention_weights(&t, mode)?;
        aggregate(q, neighbors, &w)
    }
}
