//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants, free variables, or named parameters; [`Tape::backward`]
//! consumes the tape and returns the gradients of every leaf that requires
//! one. All ops work on matrices (rank-1 tensors are treated as one row) and
//! reject non-finite outputs.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, ops, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Ln(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    SumAll(Var),
    SumRows(Var),
    Column(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    HeadScores { q: Var, k: Var, heads: usize, scale: f64 },
    HeadMix { p: Var, v: Var, heads: usize },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
}

/// A named model tensor. Frozen parameters (`trainable == false`) enter a
/// tape as constants and never receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor<f32>, trainable: bool) -> Self {
        Self { name: name.into(), value, trainable }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<f32>) -> Self {
        Self::new(name, value, false)
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Element = f32> {
    params: BTreeMap<String, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2().expect("tape values are matrices")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf | Op::Param(_) => false,
            other => inputs(other).iter().any(|v| self.needs(*v)),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Result<Var> {
        value.dims2()?;
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, Op::Leaf, false)
    }

    /// A free leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, Op::Leaf, true)
    }

    /// A named parameter. Its gradient is reported under `name` when
    /// `trainable` is set; frozen parameters are plain constants.
    pub fn param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<Var> {
        self.push_leaf(value, Op::Param(name.to_string()), trainable)
    }

    /// Places a model parameter on the tape, reusing the leaf if the same
    /// name was bound before. Gradients flow only when `train` is set and
    /// the parameter is trainable.
    pub fn bind(&mut self, p: &Param, train: bool) -> Result<Var> {
        if let Some(&v) = self.bound.get(&p.name) {
            return Ok(v);
        }
        let v = self.param(&p.name, T::lift(&p.value), train && p.trainable)?;
        self.bound.insert(p.name.clone(), v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (n2, p) = self.dims(b);
        if n != n2 {
            return Err(Error::shape(format!("matmul: {m}x{n} by {n2}x{p}")));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, n, p);
        self.push(Tensor::new([m, p], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`, the layout used by every linear layer (`x · Wᵀ`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (p, n2) = self.dims(b);
        if n != n2 {
            return Err(Error::shape(format!("matmul_nt: {m}x{n} by ({p}x{n2})^T")));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, n, p);
        self.push(Tensor::new([m, p], out)?, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        self.push(v, Op::Div(a, b), "div")
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).numel() != n {
            return Err(Error::shape(format!("add_row: {m}x{n} with row of {}", self.value(row).numel())));
        }
        let r = self.value(row).data();
        let data: Vec<T> = self.value(a).data().iter().enumerate().map(|(i, &x)| x + r[i % n]).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddRow(a, row), "add_row")
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(col).numel() != m {
            return Err(Error::shape(format!("mul_col: {m}x{n} with column of {}", self.value(col).numel())));
        }
        let c = self.value(col).data();
        let data: Vec<T> = self.value(a).data().iter().enumerate().map(|(i, &x)| x * c[i / n]).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::MulCol(a, col), "mul_col")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| T::from_f64(x.to_f64() + s));
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).gelu();
        self.push(v, Op::Gelu(a), "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sigmoid();
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| T::from_f64(libm::log(x.to_f64())));
        self.push(v, Op::Ln(a), "ln")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let v = ops::softmax_rows(self.value(a).data(), m, n);
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, v)?, Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let v = ops::log_softmax_rows(self.value(a).data(), m, n);
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, v)?, Op::LogSoftmaxRows(a), "log_softmax_rows")
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (v, rstd) = ops::layer_norm_rows(self.value(a).data(), m, n, eps);
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, v)?, Op::LayerNormRows(a, rstd), "layer_norm_rows")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::SumAll(a), "sum_all")
    }

    /// Column sums of an `m x n` matrix, as a `1 x n` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            for (j, s) in acc.iter_mut().enumerate() {
                *s += x[i * n + j].to_f64();
            }
        }
        let out = acc.into_iter().map(T::from_f64).collect();
        self.push(Tensor::new([1, n], out)?, Op::SumRows(a), "sum_rows")
    }

    /// Column `j` of an `m x n` matrix, as `m x 1`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if j >= n {
            return Err(Error::shape(format!("column {j} of {m}x{n}")));
        }
        let x = self.value(a).data();
        let out = (0..m).map(|i| x[i * n + j]).collect();
        self.push(Tensor::new([m, 1], out)?, Op::Column(a, j), "column")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows of nothing"));
        };
        let (_, n) = self.dims(first);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::shape(format!("concat_rows: widths {n} and {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new([rows, n], data)?, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        v.dims2()?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    /// Selects rows `idx` (in that order).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::shape(format!("gather row {i} of {m}")));
            }
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        self.push(Tensor::new([idx.len(), n], out)?, Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    /// Writes row `k` of `src` into row `idx[k]` of a zero `rows x n` matrix.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = self.dims(src);
        if m != idx.len() {
            return Err(Error::shape(format!("scatter {m} rows with {} indices", idx.len())));
        }
        let x = self.value(src).data();
        let mut out = vec![T::ZERO; rows * n];
        for (k, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::shape(format!("scatter row {i} into {rows}")));
            }
            out[i * n..(i + 1) * n].copy_from_slice(&x[k * n..(k + 1) * n]);
        }
        self.push(Tensor::new([rows, n], out)?, Op::ScatterRows(src, idx.to_vec()), "scatter_rows")
    }

    /// Per-head scaled attention scores. `q: S x d`, `k: T x d`; head `h`
    /// owns columns `h*d/heads .. (h+1)*d/heads`. Output is `(heads*S) x T`,
    /// head-major.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Result<Var> {
        let (s, d) = self.dims(q);
        let (t, d2) = self.dims(k);
        if d != d2 || heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("head_scores: q {s}x{d}, k {t}x{d2}, {heads} heads")));
        }
        let dk = d / heads;
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![T::ZERO; heads * s * t];
        for h in 0..heads {
            let off = h * dk;
            for i in 0..s {
                for j in 0..t {
                    let mut acc = 0.0f64;
                    for c in 0..dk {
                        acc += qd[i * d + off + c].to_f64() * kd[j * d + off + c].to_f64();
                    }
                    out[(h * s + i) * t + j] = T::from_f64(acc * scale);
                }
            }
        }
        self.push(
            Tensor::new([heads * s, t], out)?,
            Op::HeadScores { q, k, heads, scale },
            "head_scores",
        )
    }

    /// Applies per-head attention weights `p: (heads*S) x T` to `v: T x d`,
    /// concatenating heads back into `S x d`.
    pub fn head_mix(&mut self, p: Var, v: Var, heads: usize) -> Result<Var> {
        let (hs, t) = self.dims(p);
        let (t2, d) = self.dims(v);
        if t != t2 || heads == 0 || d % heads != 0 || hs % heads != 0 {
            return Err(Error::shape(format!("head_mix: p {hs}x{t}, v {t2}x{d}, {heads} heads")));
        }
        let s = hs / heads;
        let dk = d / heads;
        let (pd, vd) = (self.value(p).data(), self.value(v).data());
        let mut out = vec![T::ZERO; s * d];
        let mut acc = vec![0.0f64; dk];
        for h in 0..heads {
            let off = h * dk;
            for i in 0..s {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for j in 0..t {
                    let w = pd[(h * s + i) * t + j].to_f64();
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += w * vd[j * d + off + c].to_f64();
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    out[i * d + off + c] = T::from_f64(*a);
                }
            }
        }
        self.push(Tensor::new([s, d], out)?, Op::HeadMix { p, v, heads }, "head_mix")
    }

    /// Back-propagates from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, delta) in self.local_grads(node, &g)? {
                if self.needs(input) {
                    add_into(&mut grads[input.0], delta);
                }
            }
        }

        let mut out = Gradients { params: BTreeMap::new(), leaves: HashMap::new() };
        for (idx, node) in self.nodes.into_iter().enumerate() {
            let Some(g) = grads[idx].take() else { continue };
            let shape = node.value.shape().to_vec();
            let grad = Tensor::new(shape, g)?;
            match node.op {
                Op::Param(name) => match out.params.get_mut(&name) {
                    Some(acc) => *acc = acc.add(&grad)?,
                    None => {
                        out.params.insert(name, grad);
                    }
                },
                Op::Leaf => {
                    out.leaves.insert(Var(idx), grad);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, node: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let f = |x: f64| T::from_f64(x);
        Ok(match &node.op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, n) = self.dims(*a);
                let (_, p) = self.dims(*b);
                let mut out = Vec::new();
                if self.needs(*a) {
                    out.push((*a, matmul_nt(g, self.value(*b).data(), m, p, n)));
                }
                if self.needs(*b) {
                    out.push((*b, matmul_tn(self.value(*a).data(), g, m, n, p)));
                }
                out
            }
            Op::MatMulNt(a, b) => {
                let (m, n) = self.dims(*a);
                let (p, _) = self.dims(*b);
                let mut out = Vec::new();
                if self.needs(*a) {
                    out.push((*a, matmul_nn(g, self.value(*b).data(), m, p, n)));
                }
                if self.needs(*b) {
                    out.push((*b, matmul_tn(g, self.value(*a).data(), m, p, n)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::AddRow(a, row) => {
                let (_, n) = self.dims(*a);
                let mut dr = vec![0.0f64; n];
                for (i, &x) in g.iter().enumerate() {
                    dr[i % n] += x.to_f64();
                }
                vec![(*a, g.to_vec()), (*row, dr.into_iter().map(f).collect())]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect()),
                    (*b, g.iter().zip(av).map(|(&x, &y)| x * y).collect()),
                ]
            }
            Op::MulCol(a, col) => {
                let (m, n) = self.dims(*a);
                let (av, cv) = (self.value(*a).data(), self.value(*col).data());
                let da = g.iter().enumerate().map(|(i, &x)| x * cv[i / n]).collect();
                let mut dc = vec![0.0f64; m];
                for (i, (&x, &y)) in g.iter().zip(av).enumerate() {
                    dc[i / n] += x.to_f64() * y.to_f64();
                }
                vec![(*a, da), (*col, dc.into_iter().map(f).collect())]
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(&x, &y)| x / y).collect()),
                    (
                        *b,
                        g.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&x, (&p, &q))| f(-x.to_f64() * p.to_f64() / (q.to_f64() * q.to_f64())))
                            .collect(),
                    ),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|&x| f(x.to_f64() * s)).collect())],
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                vec![(*a, g.iter().zip(x).map(|(&d, &v)| f(d.to_f64() * ops::gelu_grad(v.to_f64()))).collect())]
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                vec![(*a, g.iter().zip(y).map(|(&d, &s)| f(d.to_f64() * s.to_f64() * (1.0 - s.to_f64()))).collect())]
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                vec![(*a, g.iter().zip(x).map(|(&d, &v)| f(d.to_f64() / v.to_f64())).collect())]
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = self.dims(*a);
                let y = node.value.data();
                let mut dx = vec![T::ZERO; m * n];
                for r in 0..m {
                    let span = r * n..(r + 1) * n;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                    for i in span {
                        dx[i] = f(y[i].to_f64() * (g[i].to_f64() - dot));
                    }
                }
                vec![(*a, dx)]
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = self.dims(*a);
                let y = node.value.data();
                let mut dx = vec![T::ZERO; m * n];
                for r in 0..m {
                    let span = r * n..(r + 1) * n;
                    let gsum: f64 = g[span.clone()].iter().map(|v| v.to_f64()).sum();
                    for i in span {
                        dx[i] = f(g[i].to_f64() - libm::exp(y[i].to_f64()) * gsum);
                    }
                }
                vec![(*a, dx)]
            }
            Op::LayerNormRows(a, rstd) => {
                let (m, n) = self.dims(*a);
                let y = node.value.data();
                let nf = n as f64;
                let mut dx = vec![T::ZERO; m * n];
                for r in 0..m {
                    let span = r * n..(r + 1) * n;
                    let gs: f64 = g[span.clone()].iter().map(|v| v.to_f64()).sum();
                    let gy: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                    for i in span {
                        dx[i] = f(rstd[r] / nf * (nf * g[i].to_f64() - gs - y[i].to_f64() * gy));
                    }
                }
                vec![(*a, dx)]
            }
            Op::SumAll(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::SumRows(a) => {
                let (m, n) = self.dims(*a);
                vec![(*a, (0..m * n).map(|i| g[i % n]).collect())]
            }
            Op::Column(a, j) => {
                let (m, n) = self.dims(*a);
                let mut dx = vec![T::ZERO; m * n];
                for i in 0..m {
                    dx[i * n + j] = g[i];
                }
                vec![(*a, dx)]
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut at = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    out.push((p, g[at..at + len].to_vec()));
                    at += len;
                }
                out
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.dims(*a);
                let mut dx = vec![T::ZERO; m * n];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        dx[i * n + c] += g[k * n + c];
                    }
                }
                vec![(*a, dx)]
            }
            Op::ScatterRows(src, idx) => {
                let (_, n) = self.dims(*src);
                let mut dx = Vec::with_capacity(idx.len() * n);
                for &i in idx {
                    dx.extend_from_slice(&g[i * n..(i + 1) * n]);
                }
                vec![(*src, dx)]
            }
            Op::HeadScores { q, k, heads, scale } => {
                let (s, d) = self.dims(*q);
                let (t, _) = self.dims(*k);
                let dk = d / heads;
                let (qd, kd) = (self.value(*q).data(), self.value(*k).data());
                let mut dq = vec![0.0f64; s * d];
                let mut dkv = vec![0.0f64; t * d];
                for h in 0..*heads {
                    let off = h * dk;
                    for i in 0..s {
                        for j in 0..t {
                            let w = g[(h * s + i) * t + j].to_f64() * scale;
                            for c in 0..dk {
                                dq[i * d + off + c] += w * kd[j * d + off + c].to_f64();
                                dkv[j * d + off + c] += w * qd[i * d + off + c].to_f64();
                            }
                        }
                    }
                }
                vec![(*q, dq.into_iter().map(f).collect()), (*k, dkv.into_iter().map(f).collect())]
            }
            Op::HeadMix { p, v, heads } => {
                let (hs, t) = self.dims(*p);
                let (_, d) = self.dims(*v);
                let s = hs / heads;
                let dk = d / heads;
                let (pd, vd) = (self.value(*p).data(), self.value(*v).data());
                let mut dp = vec![T::ZERO; hs * t];
                let mut dv = vec![0.0f64; t * d];
                for h in 0..*heads {
                    let off = h * dk;
                    for i in 0..s {
                        let gi = &g[i * d + off..i * d + off + dk];
                        for j in 0..t {
                            let vj = &vd[j * d + off..j * d + off + dk];
                            let dot: f64 = gi.iter().zip(vj).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                            dp[(h * s + i) * t + j] = f(dot);
                            let w = pd[(h * s + i) * t + j].to_f64();
                            for c in 0..dk {
                                dv[j * d + off + c] += w * gi[c].to_f64();
                            }
                        }
                    }
                }
                vec![(*p, dp), (*v, dv.into_iter().map(f).collect())]
            }
        })
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::MatMul(a, b)
        | Op::MatMulNt(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::AddRow(a, b)
        | Op::Mul(a, b)
        | Op::MulCol(a, b)
        | Op::Div(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Gelu(a)
        | Op::Sigmoid(a)
        | Op::Ln(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::LayerNormRows(a, _)
        | Op::SumAll(a)
        | Op::SumRows(a)
        | Op::Column(a, _)
        | Op::Reshape(a)
        | Op::GatherRows(a, _)
        | Op::ScatterRows(a, _) => vec![*a],
        Op::ConcatRows(parts) => parts.clone(),
        Op::HeadScores { q, k, .. } => vec![*q, *k],
        Op::HeadMix { p, v, .. } => vec![*p, *v],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn gelu_gradient_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::scalar(0.0)).unwrap();
        let y = tape.gelu(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.5]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::zeros([2, 2])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("w", Tensor::matrix(1, 1, vec![3.0]).unwrap(), false).unwrap();
        let b = tape.param("b", Tensor::matrix(1, 1, vec![1.0]).unwrap(), true).unwrap();
        let y = tape.mul(w, b).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.param("w").is_none());
        assert_eq!(g.param("b").unwrap().data(), &[3.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(tape.ln(x), Err(Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn bind_reuses_the_leaf() {
        let p = Param::new("w", Tensor::scalar(3.0), true);
        let mut tape = Tape::<f64>::new();
        let a = tape.bind(&p, true).unwrap();
        let b = tape.bind(&p, true).unwrap();
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn reused_param_accumulates() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param("a", Tensor::scalar(2.0), true).unwrap();
        let a2 = tape.param("a", Tensor::scalar(2.0), true).unwrap();
        let y = tape.mul(a, a2).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param("a").unwrap().data(), &[4.0]);
    }
}
