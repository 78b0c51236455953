//! Taped reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`ParameterStore`] for the duration of one forward
//! pass. Every operation appends a node holding its output value; parameter
//! nodes borrow the stored tensor instead of copying it. [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar with
//! respect to each parameter that was reached.
//!
//! Graphs are cheap and single-use: build one per utterance, read what you
//! need, drop it. Independent graphs over the same store can run on
//! different threads.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParameterStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'s, T> {
    Owned(Tensor<T>),
    Borrowed(&'s Tensor<T>),
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    BlockMatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RepeatRows(Var),
    RelativeGather {
        x: Var,
        max_distance: usize,
    },
    MaskFill {
        x: Var,
        mask: Vec<bool>,
    },
    Softmax(Var),
    SelectRows {
        take_a: Vec<bool>,
        a: Var,
        b: Var,
    },
    Sum(Var),
    /// Scalar function whose local gradients were computed in the forward pass.
    ScalarFn {
        inputs: Vec<Var>,
        local: Vec<Tensor<T>>,
    },
}

struct Node<'s, T> {
    value: Value<'s, T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'s, T> {
    store: &'s ParameterStore<T>,
    nodes: Vec<Node<'s, T>>,
    param_vars: Vec<Option<Var>>,
}

/// Bucket of the clipped signed distance `j - i` in `[0, 2R]`.
pub fn relative_index(i: usize, j: usize, max_distance: usize) -> usize {
    let r = max_distance as isize;
    ((j as isize - i as isize).clamp(-r, r) + r) as usize
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParameterStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParameterStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(self.store.value(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    /// Block-diagonal contraction of `x: [rows, k·m]` with `w: [k, m, n]`.
    pub fn block_matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).block_matmul(self.value(w))?;
        let rg = self.requires(x) || self.requires(w);
        Ok(self.push(out, Op::BlockMatMul(x, w), rg))
    }

    /// Adds a `[n]` bias to every row of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let b = bv.data();
        for row in out.data_mut().chunks_mut(b.len()) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let out = self.value(x).zip_map(&c, "mul_const", |a, b| a * b)?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|a| a * s);
        let rg = self.requires(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.requires(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|a| a.tanh());
        let rg = self.requires(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|a| a.max(T::zero()));
        let rg = self.requires(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::dim("concat_cols", self.shape(*first), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() || len == 0 {
            return Err(Error::dim("slice_cols", xv.shape(), &[start, len]));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        if ids.is_empty() {
            return Err(Error::Contract("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Contract(format!(
                    "row {id} out of range for table of {rows}"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        let rg = self.requires(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Broadcasts a single row `[1, n]` to `[times, n]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 || times == 0 {
            return Err(Error::dim("repeat_rows", xv.shape(), &[times]));
        }
        let cols = xv.cols();
        let data = xv.data().repeat(times);
        let out = Tensor::new(vec![times, cols], data)?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::RepeatRows(x), rg))
    }

    /// Expands per-bucket scores `x: [T, 2R+1]` into `[T, T]` with
    /// `out[i, j] = x[i, relative_index(i, j, R)]`.
    pub fn relative_gather(&mut self, x: Var, max_distance: usize) -> Result<Var> {
        let xv = self.value(x);
        let buckets = 2 * max_distance + 1;
        if xv.cols() != buckets || xv.shape().len() != 2 {
            return Err(Error::dim("relative_gather", xv.shape(), &[buckets]));
        }
        let t = xv.rows();
        let out = Tensor::from_fn(&[t, t], |idx| {
            let (i, j) = (idx / t, idx % t);
            xv.at(i, relative_index(i, j, max_distance))
        });
        let rg = self.requires(x);
        Ok(self.push(out, Op::RelativeGather { x, max_distance }, rg))
    }

    /// Sets entries where `mask` is true to `-inf`.
    pub fn mask_fill(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::dim("mask_fill", xv.shape(), &[mask.len()]));
        }
        let mut out = xv.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            if m {
                *o = T::neg_infinity();
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out, Op::MaskFill { x, mask }, rg))
    }

    pub fn softmax(&mut self, x: Var, all_masked_ok: bool) -> Result<Var> {
        let out = self.value(x).softmax_lastdim(all_masked_ok)?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Row `r` of the result is row `r` of `a` where `take_a[r]`, else of `b`.
    pub fn select_rows(&mut self, take_a: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || take_a.len() != av.rows() {
            return Err(Error::dim("select_rows", av.shape(), bv.shape()));
        }
        let mut out = bv.clone();
        let cols = av.cols();
        for (r, &t) in take_a.iter().enumerate() {
            if t {
                out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(av.row(r));
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::SelectRows { take_a, a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Records a scalar-valued function of `inputs` whose gradient with
    /// respect to each input (`local[i]`, same shape as input `i`) is already
    /// known.
    pub fn scalar_fn(&mut self, value: T, inputs: &[Var], local: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::Contract(
                "scalar_fn needs one gradient per input".into(),
            ));
        }
        for (&v, g) in inputs.iter().zip(&local) {
            if self.shape(v) != g.shape() {
                return Err(Error::dim("scalar_fn", self.shape(v), g.shape()));
            }
        }
        let rg = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(
            Tensor::scalar(value),
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                local,
            },
            rg,
        ))
    }

    /// Gradient of the scalar `loss` with respect to every reached parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), T::one()));
        let mut out = Gradients::new(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let y = self.value(Var(idx));
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.set(*id, g),
                Op::MatMul(a, b) => {
                    if self.requires(*a) {
                        let da = g.matmul_t(self.value(*b))?.reshape(self.shape(*a))?;
                        self.acc(&mut grads, *a, da)?;
                    }
                    if self.requires(*b) {
                        let db = self.value(*a).t_matmul(&g)?;
                        self.acc(&mut grads, *b, db)?;
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.requires(*a) {
                        let da = g.matmul(self.value(*b))?;
                        self.acc(&mut grads, *a, da)?;
                    }
                    if self.requires(*b) {
                        let db = g.t_matmul(self.value(*a))?;
                        self.acc(&mut grads, *b, db)?;
                    }
                }
                Op::BlockMatMul(x, w) => {
                    let wv = self.value(*w);
                    if self.requires(*x) {
                        let dx = Tensor::block_matmul_input_grad(&g, wv)?;
                        self.acc(&mut grads, *x, dx)?;
                    }
                    if self.requires(*w) {
                        let dw =
                            Tensor::block_matmul_kernel_grad(self.value(*x), &g, wv.shape()[0])?;
                        self.acc(&mut grads, *w, dw)?;
                    }
                }
                Op::AddBias(x, b) => {
                    if self.requires(*b) {
                        let cols = g.cols();
                        let mut db = vec![T::zero(); cols];
                        for row in g.data().chunks(cols) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        let db = Tensor::new(self.shape(*b).to_vec(), db)?;
                        self.acc(&mut grads, *b, db)?;
                    }
                    if self.requires(*x) {
                        self.acc(&mut grads, *x, g)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.requires(*b) {
                        self.acc(&mut grads, *b, g.clone())?;
                    }
                    if self.requires(*a) {
                        self.acc(&mut grads, *a, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires(*b) {
                        self.acc(&mut grads, *b, g.map(|v| -v))?;
                    }
                    if self.requires(*a) {
                        self.acc(&mut grads, *a, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires(*a) {
                        let da = g.zip_map(self.value(*b), "mul_grad", |x, y| x * y)?;
                        self.acc(&mut grads, *a, da)?;
                    }
                    if self.requires(*b) {
                        let db = g.zip_map(self.value(*a), "mul_grad", |x, y| x * y)?;
                        self.acc(&mut grads, *b, db)?;
                    }
                }
                Op::MulConst(x, c) => {
                    let dx = g.zip_map(c, "mul_const_grad", |a, b| a * b)?;
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    self.acc(&mut grads, *x, g.map(|v| v * s))?;
                }
                Op::Sigmoid(x) => {
                    let dx = g.zip_map(y, "sigmoid_grad", |d, s| d * s * (T::one() - s))?;
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::Tanh(x) => {
                    let dx = g.zip_map(y, "tanh_grad", |d, t| d * (T::one() - t * t))?;
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::Relu(x) => {
                    let dx =
                        g.zip_map(
                            y,
                            "relu_grad",
                            |d, r| if r > T::zero() { d } else { T::zero() },
                        )?;
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        if self.requires(p) {
                            let mut data = Vec::with_capacity(rows * cols);
                            for r in 0..rows {
                                data.extend_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            let dp = Tensor::new(self.shape(p).to_vec(), data)?;
                            self.acc(&mut grads, p, dp)?;
                        }
                        offset += cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let (cols, len) = (xv.cols(), g.cols());
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..g.rows() {
                        dx.data_mut()[r * cols + start..r * cols + start + len]
                            .copy_from_slice(g.row(r));
                    }
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let cols = tv.cols();
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id * cols..(id + 1) * cols];
                        for (d, &v) in dst.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.acc(&mut grads, *table, dt)?;
                }
                Op::RepeatRows(x) => {
                    let cols = g.cols();
                    let mut dx = vec![T::zero(); cols];
                    for row in g.data().chunks(cols) {
                        for (d, &v) in dx.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let dx = Tensor::new(self.shape(*x).to_vec(), dx)?;
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::RelativeGather { x, max_distance } => {
                    let xv = self.value(*x);
                    let t = g.rows();
                    let mut dx = Tensor::zeros(xv.shape());
                    let buckets = xv.cols();
                    for i in 0..t {
                        for j in 0..t {
                            dx.data_mut()[i * buckets + relative_index(i, j, *max_distance)] +=
                                g.at(i, j);
                        }
                    }
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::MaskFill { x, mask } => {
                    let mut dx = g;
                    for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                        if m {
                            *d = T::zero();
                        }
                    }
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::Softmax(x) => {
                    let cols = y.cols();
                    let mut dx = g;
                    for (drow, yrow) in dx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                        let inner: T = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
                        for (d, &p) in drow.iter_mut().zip(yrow) {
                            *d = p * (*d - inner);
                        }
                    }
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::SelectRows { take_a, a, b } => {
                    let cols = g.cols();
                    if self.requires(*a) {
                        let mut da = Tensor::zeros(g.shape());
                        for (r, &t) in take_a.iter().enumerate() {
                            if t {
                                da.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(g.row(r));
                            }
                        }
                        self.acc(&mut grads, *a, da)?;
                    }
                    if self.requires(*b) {
                        let mut db = g;
                        for (r, &t) in take_a.iter().enumerate() {
                            if t {
                                db.data_mut()[r * cols..(r + 1) * cols]
                                    .iter_mut()
                                    .for_each(|v| *v = T::zero());
                            }
                        }
                        self.acc(&mut grads, *b, db)?;
                    }
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    self.acc(&mut grads, *x, Tensor::filled(self.shape(*x), s))?;
                }
                Op::ScalarFn { inputs, local } => {
                    let s = g.data()[0];
                    for (&v, lg) in inputs.iter().zip(local) {
                        if self.requires(v) {
                            self.acc(&mut grads, v, lg.map(|x| x * s))?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
