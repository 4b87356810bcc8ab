use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::kernels::{self, ConvGeom, TransposedGeom};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::Real;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Softsign,
    Exp,
    Square,
    LogAbs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// How the right operand of a binary op is laid over the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[1, cols]` repeated down the rows.
    Row,
    /// `[rows, 1]` repeated across the columns.
    Col,
    Scalar,
}

enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(Binary, Bcast, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    RepeatRows(Var),
    Permute(Var, Vec<u32>),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Conv1d(Var, Var, ConvGeom),
    ConvTranspose1d(Var, Var, TransposedGeom),
    L1(Var, Vec<T>),
    CrossEntropy(Var, Vec<usize>),
    GaussianNll(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    /// `None` for parameter nodes, whose values live in the store.
    value: Option<Vec<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    params: Vec<Option<Vec<T>>>,
    leaves: Vec<(Var, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut [T]> {
        self.params.get_mut(id.0).and_then(|g| g.as_deref_mut())
    }

    pub fn leaf(&self, v: Var) -> Option<&[T]> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g.as_slice())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.params.iter().flatten().flat_map(|g| g.iter()).map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    /// Rescales parameter gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::of(max_norm / norm);
            for g in self.params.iter_mut().flatten() {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }
}

/// A tape of tensor operations over the parameters of one [`ParamStore`].
///
/// Every op evaluates eagerly and records itself; [`Graph::backward`] walks
/// the tape in reverse. Ops reject non-finite results.
pub struct Graph<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
}

fn rc(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl<'s, T: Real> Default for Graph<'s, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Real> Graph<'s, T> {
    /// A graph without parameters; inputs only.
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new() }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self { store: Some(store), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        rc(self.shape(v)).0
    }

    pub fn cols(&self, v: Var) -> usize {
        rc(self.shape(v)).1
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(vals), _) => vals,
            (None, Op::Param(id)) => self.store.expect("param node without store").get(*id).data(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape matches value")
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, what: &str) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        let tracked = self.op_tracked(&op);
        self.nodes.push(Node { shape, value: Some(value), op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_tracked(&self, op: &Op<T>) -> bool {
        let t = |v: &Var| self.nodes[v.0].tracked;
        match op {
            Op::Input => false,
            Op::Leaf | Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Binary(_, _, a, b) | Op::Conv1d(a, b, _) | Op::ConvTranspose1d(a, b, _) => t(a) || t(b),
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(t),
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::RepeatRows(a)
            | Op::Permute(a, _)
            | Op::GatherRows(a, _)
            | Op::GatherCols(a, _)
            | Op::L1(a, _)
            | Op::CrossEntropy(a, _)
            | Op::GaussianNll(a) => t(a),
        }
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input, "input")
    }

    /// An input whose gradient is reported by [`Gradients::leaf`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, "leaf")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("graph has no parameter store");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node { shape, value: None, op: Op::Param(id), tracked: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rc(self.shape(a));
        let (k2, n) = rc(self.shape(b));
        if k != k2 {
            return Err(shape_err!("matmul {:?} x {:?}", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(m, k, n, self.value(a), self.value(b));
        self.push(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, mode: Bcast) -> Result<Var> {
        let (r, c) = rc(self.shape(a));
        let (br, bc) = rc(self.shape(b));
        let ok = match mode {
            Bcast::Same => (br, bc) == (r, c),
            Bcast::Row => br == 1 && bc == c,
            Bcast::Col => br == r && bc == 1,
            Bcast::Scalar => br * bc == 1,
        };
        if !ok {
            return Err(shape_err!("{kind:?} ({mode:?}) of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let bj = match mode {
                    Bcast::Same => i * c + j,
                    Bcast::Row => j,
                    Bcast::Col => i,
                    Bcast::Scalar => 0,
                };
                out.push(f(av[i * c + j], bv[bj]));
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Binary(kind, mode, a, b), "binary op")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, Bcast::Same)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, Bcast::Same)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, Bcast::Same)
    }

    /// `a[i, j] + b[j]` for a `[1, cols]` (or `[cols]`) operand `b`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, Bcast::Row)
    }

    /// `a[i, j] + b[i]` for a `[rows, 1]` operand `b`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, Bcast::Col)
    }

    /// `a[i, j] * b[i]` for a `[rows, 1]` operand `b`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, Bcast::Col)
    }

    pub fn add_scalar_var(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, Bcast::Scalar)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let f = |x: T| match kind {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Softsign => x / (T::one() + x.abs()),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::LogAbs => x.abs().ln(),
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Unary(kind, a), "elementwise op")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    /// `x / (1 + |x|)`.
    pub fn softsign(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softsign, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    /// `ln |x|`; zero entries are rejected as non-finite.
    pub fn log_abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::LogAbs, a)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::AddScalar(a, s), "add scalar")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1, 1], vec![s], Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(vec![1, 1], vec![s], Op::Mean(a), "mean")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rc(self.shape(a));
        let v = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_into(&v[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softmax(a), "softmax")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rc(self.shape(a));
        if start + len > r {
            return Err(shape_err!("row slice {start}+{len} of {r} rows"));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        self.push(vec![len, c], out, Op::SliceRows(a, start), "slice")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rc(self.shape(a));
        if start + len > c {
            return Err(shape_err!("column slice {start}+{len} of {c} columns"));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        self.push(vec![r, len], out, Op::SliceCols(a, start), "slice")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|p| self.cols(*p)).ok_or_else(|| shape_err!("empty concat"))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if self.cols(*p) != c {
                return Err(shape_err!("row concat of {:?} with {c} columns", self.shape(*p)));
            }
            rows += self.rows(*p);
            out.extend_from_slice(self.value(*p));
        }
        self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), "concat")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|p| self.rows(*p)).ok_or_else(|| shape_err!("empty concat"))?;
        let mut total = 0;
        for p in parts {
            if self.rows(*p) != r {
                return Err(shape_err!("column concat of {:?} with {r} rows", self.shape(*p)));
            }
            total += self.cols(*p);
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let c = self.cols(*p);
                out.extend_from_slice(&self.value(*p)[i * c..(i + 1) * c]);
            }
        }
        self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), "concat")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.tensor(a).transpose();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err!("reshape {:?} into {shape:?}", self.shape(a)));
        }
        let out = self.value(a).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(a), "reshape")
    }

    /// Repeats a `[1, cols]` row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, c) = rc(self.shape(a));
        if r != 1 {
            return Err(shape_err!("repeat_rows needs one row, got {:?}", self.shape(a)));
        }
        let row = self.value(a);
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(row);
        }
        self.push(vec![n, c], out, Op::RepeatRows(a), "repeat")
    }

    /// Gathers `out.flat[i] = a.flat[src[i]]`; `src` must be a permutation.
    pub fn permute(&mut self, a: Var, src: Vec<u32>, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if src.len() != v.len() || shape.iter().product::<usize>() != v.len() {
            return Err(shape_err!("permutation of {} entries into {shape:?}", v.len()));
        }
        let out = src.iter().map(|&i| v[i as usize]).collect();
        self.push(shape.to_vec(), out, Op::Permute(a, src), "permute")
    }

    /// Row lookup into a `[vocab, dim]` table; the embedding primitive.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = rc(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::UnknownCode { code: bad, limit: v });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(vec![ids.len(), d], out, Op::GatherRows(table, ids.to_vec()), "gather")
    }

    /// Column lookup into a `[dim, vocab]` table, giving `[dim, ids.len()]`.
    /// Equivalent to a 1x1 convolution over one-hot inputs.
    pub fn gather_cols(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (d, v) = rc(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::UnknownCode { code: bad, limit: v });
        }
        let tv = self.value(table);
        let n = ids.len();
        let mut out = vec![T::zero(); d * n];
        for r in 0..d {
            for (j, &i) in ids.iter().enumerate() {
                out[r * n + j] = tv[r * v + i];
            }
        }
        self.push(vec![d, n], out, Op::GatherCols(table, ids.to_vec()), "gather")
    }

    /// Length-preserving dilated convolution of `x [c_in, T]` with
    /// `w [c_out, c_in, K]`. `causal` pads `(K-1)*dilation` zeros on the left;
    /// otherwise the padding is split evenly.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize, causal: bool) -> Result<Var> {
        let (c_in, len) = rc(self.shape(x));
        let ws = self.shape(w);
        if ws.len() != 3 || ws[1] != c_in || dilation == 0 {
            return Err(shape_err!("conv1d of {:?} with kernel {ws:?} (dilation {dilation})", self.shape(x)));
        }
        let (c_out, kernel) = (ws[0], ws[2]);
        let total = (kernel - 1) * dilation;
        let pad_left = if causal { total } else { total / 2 };
        let geom = ConvGeom { c_in, c_out, kernel, dilation, pad_left, len };
        let out = kernels::conv1d_forward(&geom, self.value(x), self.value(w));
        self.push(vec![c_out, len], out, Op::Conv1d(x, w, geom), "conv1d")
    }

    /// Transposed convolution of `x [c_in, T]` with `w [c_in, c_out, K]`,
    /// producing exactly `[c_out, T * stride]`. Needs `K >= stride`; the
    /// `(K - stride) / 2` leading samples of the full output are cropped.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (c_in, len) = rc(self.shape(x));
        let ws = self.shape(w);
        if ws.len() != 3 || ws[0] != c_in || stride == 0 || ws[2] < stride {
            return Err(shape_err!("conv_transpose1d of {:?} with kernel {ws:?} (stride {stride})", self.shape(x)));
        }
        let (c_out, kernel) = (ws[1], ws[2]);
        let geom = TransposedGeom { c_in, c_out, kernel, stride, crop: (kernel - stride) / 2, len };
        let out = kernels::conv_transpose1d_forward(&geom, self.value(x), self.value(w));
        self.push(vec![c_out, geom.out_len()], out, Op::ConvTranspose1d(x, w, geom), "conv_transpose1d")
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, a: Var, target: &[T]) -> Result<Var> {
        let v = self.value(a);
        if v.len() != target.len() {
            return Err(shape_err!("l1 of {} values against {}", v.len(), target.len()));
        }
        let s = v.iter().zip(target).map(|(x, y)| (*x - *y).abs()).sum::<T>() / T::of(v.len() as f64);
        self.push(vec![1, 1], vec![s], Op::L1(a, target.to_vec()), "l1 loss")
    }

    /// Mean cross-entropy of `logits [T, classes]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = rc(self.shape(logits));
        if r != targets.len() {
            return Err(shape_err!("cross entropy of {r} rows against {} targets", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::UnknownCode { code: bad, limit: c });
        }
        let v = self.value(logits);
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &v[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / T::of(r as f64);
        self.push(vec![1, 1], vec![loss], Op::CrossEntropy(logits, targets.to_vec()), "cross entropy")
    }

    /// Negative log-density of `z` under a standard Gaussian:
    /// `0.5 * sum(z^2 + ln 2pi)`.
    pub fn gaussian_nll(&mut self, z: Var) -> Result<Var> {
        let ln2pi = T::of(core::f64::consts::TAU.ln());
        let half = T::of(0.5);
        let s = self.value(z).iter().map(|&x| half * (x * x + ln2pi)).sum();
        self.push(vec![1, 1], vec![s], Op::GaussianNll(z), "gaussian nll")
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let n_params = self.store.map_or(0, |s| s.len());
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients { params: vec![None; n_params], leaves: Vec::new() };

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.backprop_node(i, &dy, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>], out: &mut Gradients<T>) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.value(v).len()]);
            f(slot);
        };
        match &node.op {
            Op::Input => {}
            Op::Leaf => out.leaves.push((Var(i), dy.to_vec())),
            Op::Param(id) => match &mut out.params[id.0] {
                Some(g) => g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d),
                slot @ None => *slot = Some(dy.to_vec()),
            },
            Op::MatMul(a, b) => {
                let (m, k) = rc(self.shape(*a));
                let n = rc(self.shape(*b)).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |g| kernels::matmul_a_bt_acc(m, n, k, dy, bv, g));
                acc(*b, &mut |g| kernels::matmul_at_b_acc(k, m, n, av, dy, g));
            }
            Op::Binary(kind, mode, a, b) => {
                let (r, c) = rc(self.shape(*a));
                let (av, bv) = (self.value(*a), self.value(*b));
                let bidx = |i: usize, j: usize| match mode {
                    Bcast::Same => i * c + j,
                    Bcast::Row => j,
                    Bcast::Col => i,
                    Bcast::Scalar => 0,
                };
                acc(*a, &mut |g| {
                    for ii in 0..r {
                        for j in 0..c {
                            let k = ii * c + j;
                            g[k] += match kind {
                                Binary::Add | Binary::Sub => dy[k],
                                Binary::Mul => dy[k] * bv[bidx(ii, j)],
                            };
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for ii in 0..r {
                        for j in 0..c {
                            let k = ii * c + j;
                            g[bidx(ii, j)] += match kind {
                                Binary::Add => dy[k],
                                Binary::Sub => -dy[k],
                                Binary::Mul => dy[k] * av[k],
                            };
                        }
                    }
                });
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let y = node.value.as_deref().expect("unary output");
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        let d = match kind {
                            Unary::Tanh => T::one() - y[k] * y[k],
                            Unary::Sigmoid => y[k] * (T::one() - y[k]),
                            Unary::Relu => {
                                if x[k] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Softsign => {
                                let den = T::one() + x[k].abs();
                                T::one() / (den * den)
                            }
                            Unary::Exp => y[k],
                            Unary::Square => T::of(2.0) * x[k],
                            Unary::LogAbs => T::one() / x[k],
                        };
                        g[k] += dy[k] * d;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d * *s)),
            Op::AddScalar(a, _) | Op::Reshape(a) => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d)),
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean(a) => {
                let n = T::of(self.value(*a).len() as f64);
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::Softmax(a) => {
                let (r, c) = rc(&node.shape);
                let y = node.value.as_deref().expect("softmax output");
                acc(*a, &mut |g| {
                    for ii in 0..r {
                        let (yr, dr) = (&y[ii * c..(ii + 1) * c], &dy[ii * c..(ii + 1) * c]);
                        let dot: T = yr.iter().zip(dr).map(|(a, b)| *a * *b).sum();
                        for j in 0..c {
                            g[ii * c + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = rc(self.shape(*a)).1;
                acc(*a, &mut |g| g[start * c..start * c + dy.len()].iter_mut().zip(dy).for_each(|(g, d)| *g += *d));
            }
            Op::SliceCols(a, start) => {
                let c = rc(self.shape(*a)).1;
                let (r, len) = rc(&node.shape);
                acc(*a, &mut |g| {
                    for ii in 0..r {
                        for j in 0..len {
                            g[ii * c + start + j] += dy[ii * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(*p, &mut |g| g.iter_mut().zip(&dy[off..off + n]).for_each(|(g, d)| *g += *d));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = rc(&node.shape);
                let mut off = 0;
                for p in parts {
                    let c = self.cols(*p);
                    acc(*p, &mut |g| {
                        for ii in 0..r {
                            for j in 0..c {
                                g[ii * c + j] += dy[ii * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = rc(self.shape(*a));
                acc(*a, &mut |g| {
                    for ii in 0..r {
                        for j in 0..c {
                            g[ii * c + j] += dy[j * r + ii];
                        }
                    }
                });
            }
            Op::RepeatRows(a) => {
                let c = rc(self.shape(*a)).1;
                acc(*a, &mut |g| {
                    for chunk in dy.chunks(c) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += *d);
                    }
                });
            }
            Op::Permute(a, src) => acc(*a, &mut |g| {
                for (k, &s) in src.iter().enumerate() {
                    g[s as usize] += dy[k];
                }
            }),
            Op::GatherRows(table, ids) => {
                let d = rc(self.shape(*table)).1;
                acc(*table, &mut |g| {
                    for (k, &id) in ids.iter().enumerate() {
                        g[id * d..(id + 1) * d].iter_mut().zip(&dy[k * d..(k + 1) * d]).for_each(|(g, v)| *g += *v);
                    }
                });
            }
            Op::GatherCols(table, ids) => {
                let (d, v) = rc(self.shape(*table));
                let n = ids.len();
                acc(*table, &mut |g| {
                    for r in 0..d {
                        for (j, &id) in ids.iter().enumerate() {
                            g[r * v + id] += dy[r * n + j];
                        }
                    }
                });
            }
            Op::Conv1d(x, w, geom) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut dx = want_x.then(|| vec![T::zero(); xv.len()]);
                let mut dw = want_w.then(|| vec![T::zero(); wv.len()]);
                kernels::conv1d_backward(geom, xv, wv, dy, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, &mut |g| g.iter_mut().zip(&dx).for_each(|(g, d)| *g += *d));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |g| g.iter_mut().zip(&dw).for_each(|(g, d)| *g += *d));
                }
            }
            Op::ConvTranspose1d(x, w, geom) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); wv.len()]);
                kernels::conv_transpose1d_backward(geom, xv, wv, dy, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, &mut |g| g.iter_mut().zip(&dx).for_each(|(g, d)| *g += *d));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |g| g.iter_mut().zip(&dw).for_each(|(g, d)| *g += *d));
                }
            }
            Op::L1(a, target) => {
                let v = self.value(*a);
                let n = T::of(v.len() as f64);
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        let diff = v[k] - target[k];
                        let s = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        g[k] += dy[0] * s / n;
                    }
                });
            }
            Op::CrossEntropy(logits, targets) => {
                let (r, c) = rc(self.shape(*logits));
                let v = self.value(*logits);
                let scale = dy[0] / T::of(r as f64);
                acc(*logits, &mut |g| {
                    let mut p = vec![T::zero(); c];
                    for (ii, &t) in targets.iter().enumerate() {
                        softmax_into(&v[ii * c..(ii + 1) * c], &mut p);
                        p[t] -= T::one();
                        g[ii * c..(ii + 1) * c].iter_mut().zip(&p).for_each(|(g, p)| *g += *p * scale);
                    }
                });
            }
            Op::GaussianNll(z) => {
                let v = self.value(*z);
                acc(*z, &mut |g| g.iter_mut().zip(v).for_each(|(g, x)| *g += dy[0] * *x));
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_into<T: Real>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}
