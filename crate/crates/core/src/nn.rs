//! Encoder building blocks recorded on a [`Tape`].

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Uniform Glorot initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<F: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| F::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
}

/// Affine map `x · W + b`, `W` stored as `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], F::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm_rows(x, g, b, F::from_f64(LAYER_NORM_EPS))
    }
}

/// Scaled dot-product attention over `heads` column blocks of width `dim / heads`,
/// with scores divided by `sqrt(dim / heads)`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim),
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        self.forward_inner(tape, store, x, None)
    }

    /// Forward pass that also returns each head's attention matrix.
    pub fn forward_with_weights<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<(Var, Vec<Tensor<F>>)> {
        let mut weights = Vec::with_capacity(self.heads);
        let out = self.forward_inner(tape, store, x, Some(&mut weights))?;
        Ok((out, weights))
    }

    fn forward_inner<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        mut capture: Option<&mut Vec<Tensor<F>>>,
    ) -> Result<Var> {
        let dim = tape.value(x).cols();
        if !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dimension {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        let head_dim = dim / self.heads;
        let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * head_dim;
            let qh = tape.slice_cols(q, start, head_dim)?;
            let kh = tape.slice_cols(k, start, head_dim)?;
            let vh = tape.slice_cols(v, start, head_dim)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            if let Some(c) = capture.as_deref_mut() {
                c.push(tape.value(attn).clone());
            }
            heads.push(tape.matmul(attn, vh)?);
        }
        let joined = tape.concat_cols(&heads)?;
        self.output.forward(tape, store, joined)
    }
}

/// Token mixer of an encoder layer.
#[derive(Clone, Debug)]
pub enum Mixer {
    Attention(MultiHeadAttention),
    /// Per-position fully-connected map used when self-attention is ablated.
    Dense(Linear),
}

/// Post-norm encoder layer: mixer, residual + layer norm, ReLU feed-forward,
/// residual + layer norm. The feed-forward hidden width equals `dim`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub mixer: Mixer,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        self_attention: bool,
    ) -> Result<Self> {
        let mixer = if self_attention {
            Mixer::Attention(MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.attn"),
                dim,
                heads,
            )?)
        } else {
            Mixer::Dense(Linear::new(store, rng, &format!("{name}.dense"), dim, dim))
        };
        Ok(Self {
            mixer,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff_in: Linear::new(store, rng, &format!("{name}.ff_in"), dim, dim),
            ff_out: Linear::new(store, rng, &format!("{name}.ff_out"), dim, dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let mixed = match &self.mixer {
            Mixer::Attention(attn) => attn.forward(tape, store, x)?,
            Mixer::Dense(lin) => lin.forward(tape, store, x)?,
        };
        let h = tape.add(x, mixed)?;
        let h = self.norm1.forward(tape, store, h)?;
        let f = self.ff_in.forward(tape, store, h)?;
        let f = tape.relu(f);
        let f = self.ff_out.forward(tape, store, f)?;
        let out = tape.add(h, f)?;
        self.norm2.forward(tape, store, out)
    }
}
