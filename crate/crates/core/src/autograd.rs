//! Reverse-mode differentiation over a dynamic tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Parameters are
//! owned by a [`ParamStore`]; a tape copies their current values in when they
//! are first referenced and, on [`Tape::backward`], accumulates gradients back
//! into the store. The op set is closed: matrix products, elementwise
//! arithmetic, row softmax, row layer norm, ReLU, norms, dot products, row
//! gathers and column slices, plus a logistic loss for the auxiliary head.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    MulScalar(Var, Var),
    Exp(Var),
    Relu(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<F>,
        inv_std: Vec<F>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<F>,
    },
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Norm(Var),
    Dot(Var, Var),
    BceWithLogits(Var, Vec<F>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by tape variable.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to `v`, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Input)
    }

    /// References a parameter. Repeated references return the same variable.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `a[m×n] · b[n×p]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        let (n2, p) = self.dims2(b);
        if n != n2 {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![F::zero(); m * p];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, n, p);
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::MatMul(a, b)))
    }

    /// `a[m×n] · b[p×n]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        let (p, n2) = self.dims2(b);
        if n != n2 {
            return Err(shape_err("matmul_t", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![F::zero(); m * p];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, n, p);
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::MatMulT(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(b).len() != n {
            return Err(shape_err("add_row", self.value(x).shape(), self.value(b).shape()));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (v, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, b)))
    }

    /// Linear map `x · w + b` with `w` of shape `in × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddConst(x))
    }

    /// Multiplies every element of `x` by the single-element variable `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!(
                "mul_scalar expects a single-element scale, got shape {:?}",
                self.value(s).shape()
            )));
        }
        let c = self.value(s).item();
        let t = self.value(x).map(|v| v * c);
        Ok(self.push(t, Op::MulScalar(x, s)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.exp());
        self.push(t, Op::Exp(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(t, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x))
    }

    /// Softmax over each row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        let src = self.value(x);
        if !src.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            data.extend(tensor::softmax_unchecked(src.row(r), F::one()));
        }
        let shape = src.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::SoftmaxRows(x)))
    }

    /// Layer normalization of each row followed by `gain ∘ y + bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "layer norm over rows of width {n} with gain {:?} and bias {:?}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let (y, s) = tensor::normalize_moments(src.row(r), eps);
            out.extend(y.iter().zip(g.iter().zip(b)).map(|(&y, (&g, &b))| g * y + b));
            normalized.extend(y);
            inv_std.push(s);
        }
        let shape = src.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Scales each row to unit ℓ2 norm. Fails on an all-zero row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        let src = self.value(x);
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = src.row(r);
            let norm = tensor::l2_norm(row);
            if !(norm > F::zero()) || !norm.is_finite() {
                return Err(Error::Degenerate(format!("cannot normalize row {r} with norm {norm}")));
            }
            data.extend(row.iter().map(|&v| v / norm));
            norms.push(norm);
        }
        let shape = src.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::NormalizeRows { x, norms }))
    }

    /// Selects rows of a matrix (repetition allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x);
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Shape(format!("row {r} out of range for {m} rows")));
            }
            data.extend_from_slice(src.row(r));
        }
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], data)?,
            Op::GatherRows(x, rows.to_vec()),
        ))
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start + len > n {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of range for width {n}",
                start + len
            )));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat of zero tensors".into()));
        };
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p);
            if pm != m {
                return Err(shape_err(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// ℓ2 norm of all elements.
    pub fn norm(&mut self, x: Var) -> Var {
        let s = tensor::l2_norm(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Norm(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err("dot", ta.shape(), tb.shape()));
        }
        let s = tensor::dot(ta.data(), tb.data());
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[F]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "bce over {} logits with {} labels",
                x.len(),
                labels.len()
            )));
        }
        let n = F::from_f64(labels.len() as f64);
        let total: F = x
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| {
                let pos = if x > F::zero() { x } else { F::zero() };
                pos - x * y + (F::one() + (-x.abs()).exp()).ln()
            })
            .sum();
        Ok(self.push(Tensor::scalar(total / n), Op::BceWithLogits(logits, labels.to_vec())))
    }

    /// Propagates the gradient of the scalar `loss` to every recorded variable
    /// and accumulates it into the trainable parameters of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<Gradients<F>> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                let p = store.get_mut(*id);
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
        Ok(grads)
    }

    /// Parameter gradients of one backward pass, in tape order.
    pub fn param_gradients(&self, mut grads: Gradients<F>) -> Vec<(ParamId, Tensor<F>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match &node.op {
                Op::Param(id) => grads.grads[i].take().map(|g| (*id, g)),
                _ => None,
            })
            .collect()
    }

    /// Like [`Tape::backward`] but leaves parameter gradients untouched.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [F])| {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, n) = self.dims2(*a);
                let p = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|da| gemm_nt(gd, bv, da, m, p, n));
                acc(*b, &|db| gemm_tn(av, gd, db, m, n, p));
            }
            Op::MatMulT(a, b) => {
                let (m, n) = self.dims2(*a);
                let p = self.value(*b).rows();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|da| gemm_nn(gd, bv, da, m, p, n));
                acc(*b, &|db| gemm_tn(gd, av, db, m, p, n));
            }
            Op::Add(a, b) => {
                acc(*a, &|da| add_into(da, gd));
                acc(*b, &|db| add_into(db, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &|da| add_into(da, gd));
                acc(*b, &|db| {
                    for (d, &g) in db.iter_mut().zip(gd) {
                        *d -= g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|da| {
                    for ((d, &g), &y) in da.iter_mut().zip(gd).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &|db| {
                    for ((d, &g), &x) in db.iter_mut().zip(gd).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).len();
                acc(*x, &|dx| add_into(dx, gd));
                acc(*b, &|db| {
                    for row in gd.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|dx| {
                for (d, &g) in dx.iter_mut().zip(gd) {
                    *d += g * *c;
                }
            }),
            Op::AddConst(x) => acc(*x, &|dx| add_into(dx, gd)),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                let xv = self.value(*x).data();
                acc(*x, &|dx| {
                    for (d, &g) in dx.iter_mut().zip(gd) {
                        *d += g * c;
                    }
                });
                acc(*s, &|ds| ds[0] += tensor::dot(gd, xv));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &|dx| {
                    for ((d, &g), &y) in dx.iter_mut().zip(gd).zip(y) {
                        *d += g * y;
                    }
                });
            }
            Op::Relu(x) => {
                let y = node.value.data();
                acc(*x, &|dx| {
                    for ((d, &g), &y) in dx.iter_mut().zip(gd).zip(y) {
                        if y > F::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = F::from_f64(2.0);
                acc(*x, &|dx| {
                    for ((d, &g), &x) in dx.iter_mut().zip(gd).zip(xv) {
                        *d += two * x * g;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.cols();
                acc(*x, &|dx| {
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(gd.chunks(n)).zip(y.data().chunks(n)) {
                        let s = tensor::dot(gr, yr);
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - s);
                        }
                    }
                });
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = self.value(*x).cols();
                let gv = self.value(*gain).data();
                let nf = F::from_f64(n as f64);
                acc(*gain, &|dg| {
                    for (gr, yr) in gd.chunks(n).zip(normalized.chunks(n)) {
                        for ((d, &g), &y) in dg.iter_mut().zip(gr).zip(yr) {
                            *d += g * y;
                        }
                    }
                });
                acc(*bias, &|db| {
                    for gr in gd.chunks(n) {
                        add_into(db, gr);
                    }
                });
                acc(*x, &|dx| {
                    let mut dy = vec![F::zero(); n];
                    for (((dr, gr), yr), &s) in dx
                        .chunks_mut(n)
                        .zip(gd.chunks(n))
                        .zip(normalized.chunks(n))
                        .zip(inv_std)
                    {
                        for ((d, &g), &w) in dy.iter_mut().zip(gr).zip(gv) {
                            *d = g * w;
                        }
                        let mean_dy = dy.iter().copied().sum::<F>() / nf;
                        let mean_dyy = tensor::dot(&dy, yr) / nf;
                        for ((d, &dyv), &y) in dr.iter_mut().zip(&dy).zip(yr) {
                            *d += s * (dyv - mean_dy - y * mean_dyy);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let n = y.cols();
                acc(*x, &|dx| {
                    for (((dr, gr), yr), &norm) in dx.chunks_mut(n).zip(gd.chunks(n)).zip(y.data().chunks(n)).zip(norms)
                    {
                        let s = tensor::dot(gr, yr);
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += (g - y * s) / norm;
                        }
                    }
                });
            }
            Op::GatherRows(x, rows) => {
                let n = self.value(*x).cols();
                acc(*x, &|dx| {
                    for (gr, &r) in gd.chunks(n).zip(rows) {
                        add_into(&mut dx[r * n..(r + 1) * n], gr);
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let n = self.value(*x).cols();
                let len = node.value.cols();
                acc(*x, &|dx| {
                    for (dr, gr) in dx.chunks_mut(n).zip(gd.chunks(len)) {
                        add_into(&mut dr[*start..*start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &|dp| {
                        for (dr, gr) in dp.chunks_mut(w).zip(gd.chunks(total)) {
                            add_into(dr, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                acc(*x, &|dx| dx.iter_mut().for_each(|d| *d += g0));
            }
            Op::Norm(x) => {
                let norm = node.value.item();
                if norm > F::zero() {
                    let scale = gd[0] / norm;
                    let xv = self.value(*x).data();
                    acc(*x, &|dx| {
                        for (d, &x) in dx.iter_mut().zip(xv) {
                            *d += scale * x;
                        }
                    });
                }
            }
            Op::Dot(a, b) => {
                let g0 = gd[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|da| {
                    for (d, &y) in da.iter_mut().zip(bv) {
                        *d += g0 * y;
                    }
                });
                acc(*b, &|db| {
                    for (d, &x) in db.iter_mut().zip(av) {
                        *d += g0 * x;
                    }
                });
            }
            Op::BceWithLogits(logits, labels) => {
                let scale = gd[0] / F::from_f64(labels.len() as f64);
                let xv = self.value(*logits).data();
                acc(*logits, &|dx| {
                    for ((d, &x), &y) in dx.iter_mut().zip(xv).zip(labels) {
                        let p = F::one() / (F::one() + (-x).exp());
                        *d += scale * (p - y);
                    }
                });
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks the analytic gradient of `f` with respect to each input against
    /// central differences.
    fn check_gradients(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.gradients(loss).unwrap();
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(vars[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            for j in 0..input.len() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == k {
                                t.data_mut()[j] += delta;
                            }
                            tape.input(t)
                        })
                        .collect();
                    let loss = f(&mut tape, &vars);
                    tape.value(loss).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "input {k} elem {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Reduces a tensor to a scalar with fixed random weights so every
    /// element's gradient is exercised.
    fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, tape.value(x).shape());
        let w = tape.input(w);
        let p = tape.mul(x, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![1.0f64, -2.0, 3.0]));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.sum(p);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient_and_accumulation() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.5f64, -1.5]));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.dot(p, p).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0, -3.0]);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[2.0, -6.0]);
        store.zero_grad();
        assert!(store.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![2.0f64]));
        store.get_mut(id).trainable = false;
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.square(p);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::<f32>::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x, &mut store), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn finite_differences_per_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 5]);
        let c = random(&mut rng, &[5, 4]);
        let v = random(&mut rng, &[4]);
        let s = random(&mut rng, &[1]);

        check_gradients(vec![a.clone(), b.clone()], |t, x| {
            let y = t.matmul(x[0], x[1]).unwrap();
            weighted_sum(t, y, 1)
        });
        check_gradients(vec![a.clone(), c.clone()], |t, x| {
            let y = t.matmul_t(x[0], x[1]).unwrap();
            weighted_sum(t, y, 2)
        });
        check_gradients(vec![a.clone(), a.map(|x| x * 0.3 + 0.1)], |t, x| {
            let s = t.add(x[0], x[1]).unwrap();
            let d = t.sub(s, x[1]).unwrap();
            let m = t.mul(d, x[1]).unwrap();
            weighted_sum(t, m, 3)
        });
        check_gradients(vec![a.clone(), v.clone()], |t, x| {
            let y = t.add_row(x[0], x[1]).unwrap();
            weighted_sum(t, y, 4)
        });
        check_gradients(vec![a.clone(), s.clone()], |t, x| {
            let e = t.exp(x[1]);
            let y = t.mul_scalar(x[0], e).unwrap();
            let y = t.scale(y, 0.7);
            let y = t.add_const(y, 0.2);
            let y = t.square(y);
            weighted_sum(t, y, 5)
        });
        check_gradients(vec![a.clone()], |t, x| {
            let y = t.relu(x[0]);
            weighted_sum(t, y, 6)
        });
        check_gradients(vec![a.map(|x| 3.0 * x)], |t, x| {
            let y = t.softmax_rows(x[0]).unwrap();
            weighted_sum(t, y, 7)
        });
        check_gradients(vec![a.clone(), v.map(|x| x + 1.5), v.clone()], |t, x| {
            let y = t.layer_norm_rows(x[0], x[1], x[2], 1e-5).unwrap();
            weighted_sum(t, y, 8)
        });
        check_gradients(vec![a.clone()], |t, x| {
            let y = t.normalize_rows(x[0]).unwrap();
            weighted_sum(t, y, 9)
        });
        check_gradients(vec![a.clone()], |t, x| {
            let g = t.gather_rows(x[0], &[2, 0, 2]).unwrap();
            let l = t.slice_cols(g, 1, 2).unwrap();
            let r = t.slice_cols(g, 0, 1).unwrap();
            let y = t.concat_cols(&[r, l, r]).unwrap();
            weighted_sum(t, y, 10)
        });
        check_gradients(vec![a.clone(), a.map(|x| x - 0.4)], |t, x| {
            let n = t.norm(x[0]);
            let d = t.dot(x[0], x[1]).unwrap();
            let y = t.mul(n, d).unwrap();
            t.sum(y)
        });
        check_gradients(vec![v.map(|x| 4.0 * x)], |t, x| {
            t.bce_with_logits(x[0], &[1.0, 0.0, 1.0, 0.0]).unwrap()
        });
    }

    #[test]
    fn normalize_rows_rejects_zero_row() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 0.0]).unwrap());
        assert!(matches!(tape.normalize_rows(x), Err(Error::Degenerate(_))));
    }
}
