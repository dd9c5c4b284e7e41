//! Dense row-major tensors and the small set of kernels the autograd tape needs.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is used for training and inference,
/// `f64` for gradient checks.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    /// Name written into checkpoint headers.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows × cols` matrix from row slices.
    pub fn from_rows<R: AsRef<[F]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has length {}, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: F) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

/// `c[m×p] += a[m×n] · b[n×p]`
pub(crate) fn gemm_nn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let ci = &mut c[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == F::zero() {
                continue;
            }
            let bk = &b[k * p..(k + 1) * p];
            for (cv, &bv) in ci.iter_mut().zip(bk) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×p] += a[m×n] · b[p×n]ᵀ`
pub(crate) fn gemm_nt<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, n: usize, p: usize) {
    if m > 1 && n * p >= 256 {
        let mut bt = vec![F::zero(); n * p];
        for j in 0..p {
            for k in 0..n {
                bt[k * p + j] = b[j * n + k];
            }
        }
        gemm_nn(a, &bt, c, m, n, p);
        return;
    }
    for i in 0..m {
        let ai = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let bj = &b[j * n..(j + 1) * n];
            c[i * p + j] += dot(ai, bj);
        }
    }
}

/// `c[n×p] += a[m×n]ᵀ · b[m×p]`
pub(crate) fn gemm_tn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, n: usize, p: usize) {
    for k in 0..m {
        let ak = &a[k * n..(k + 1) * n];
        let bk = &b[k * p..(k + 1) * p];
        for (i, &aki) in ak.iter().enumerate() {
            if aki == F::zero() {
                continue;
            }
            let ci = &mut c[i * p..(i + 1) * p];
            for (cv, &bv) in ci.iter_mut().zip(bk) {
                *cv += aki * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators, so the compiler can
/// vectorize the loop. The summation order is fixed, so results are
/// reproducible.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn l2_norm<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// Numerically stable softmax of `scores / temperature`.
pub fn softmax<F: Scalar>(scores: &[F], temperature: F) -> Result<Vec<F>> {
    if !(temperature > F::zero()) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("softmax scores must be finite".into()));
    }
    Ok(softmax_unchecked(scores, temperature.recip()))
}

pub(crate) fn softmax_unchecked<F: Scalar>(scores: &[F], inv_temperature: F) -> Vec<F> {
    let max = scores.iter().fold(F::neg_infinity(), |m, &s| if s > m { s } else { m });
    let mut out: Vec<F> = scores.iter().map(|&s| ((s - max) * inv_temperature).exp()).collect();
    let z: F = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / z;
    }
    out
}

/// Layer normalization of a single vector followed by the affine map `gain ∘ y + bias`.
pub fn layer_norm<F: Scalar>(x: &[F], gain: &[F], bias: &[F], eps: F) -> Result<Vec<F>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer norm over {} values with gain {} and bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if !(eps > F::zero()) {
        return Err(Error::InvalidArgument("layer norm epsilon must be positive".into()));
    }
    let (y, _) = normalize_moments(x, eps);
    Ok(y.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&y, (&g, &b))| g * y + b)
        .collect())
}

/// Returns `(x - mean) / sqrt(var + eps)` and `1 / sqrt(var + eps)`.
pub(crate) fn normalize_moments<F: Scalar>(x: &[F], eps: F) -> (Vec<F>, F) {
    let n = F::from_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv_std = (var + eps).sqrt().recip();
    (x.iter().map(|&v| (v - mean) * inv_std).collect(), inv_std)
}
