//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the inputs it
//! read. `backward` walks the nodes once, newest first, pushing upstream
//! gradients into the inputs. Parameters are borrowed rather than copied, so a
//! tape lives no longer than the parameters it reads.
//!
//! Matrices are row-major. A rank-1 tensor of length `n` is treated as a single
//! `1 x n` row by the matrix ops, which is how biases and attention vectors are
//! stored.

use std::borrow::Cow;

use crate::error::{G2pError, Result};
use crate::scalar::Scalar;
use crate::tensor::{dims2, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulConst(Var, Vec<T>),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Pick { src: Var, idx: Vec<usize> },
    Sum(Var),
    WeightedSum { alpha: Var, states: Vec<Var> },
    RepeatCols(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Pick { .. } => "pick",
            Op::Sum(..) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::RepeatCols(..) => "repeat_cols",
        }
    }
}

struct Node<'p, T: Clone> {
    shape: Vec<usize>,
    value: Cow<'p, [T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Node indices in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

/// Operation recorder for one forward/backward pass.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    check_finite: bool,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Fail any op (forward or backward) that produces NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'p, [T]>, op: Op<T>) -> Result<Var> {
        let needs_grad = match &op {
            Op::Leaf => false,
            op => inputs(op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(G2pError::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf borrowing the tensor's storage; gradients are tracked
    /// when the tensor is flagged `requires_grad`.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        let v = self
            .push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf)
            .expect("leaf values are not checked");
        self.nodes[v.0].needs_grad = t.requires_grad();
        v
    }

    /// Records an owned leaf; tracks gradients when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires = t.requires_grad();
        let shape = t.shape().to_vec();
        let v = self
            .push(shape, Cow::Owned(t.into_data()), Op::Leaf)
            .expect("leaf values are not checked");
        self.nodes[v.0].needs_grad = requires;
        v
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(G2pError::dim("constant", &shape, &[data.len()]));
        }
        self.push(shape, Cow::Owned(data), Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        let numel = shape.iter().product();
        self.constant(shape.to_vec(), vec![T::zero(); numel])
            .expect("shape matches by construction")
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        dims2(shape).ok_or_else(|| G2pError::dim(op, shape, &[]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(G2pError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a[m x k] . b[k x n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(G2pError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), m, k, n, &mut out);
        self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b))
    }

    /// `a[m x k] . b[n x k]^T`, the layout of every weight application `x W^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_nt")?;
        let (n, k2) = self.dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(G2pError::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), m, k, n, &mut out);
        self.push(vec![m, n], Cow::Owned(out), Op::MatMulNt(a, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims(a, "add_row")?;
        if self.value(row).len() != n {
            return Err(G2pError::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out: Vec<T> = self
            .value(a)
            .chunks_exact(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &b)| x + b))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::Scale(a, k))
    }

    /// Adds a constant array of the same shape; no gradient flows to the constant.
    pub fn add_const(&mut self, a: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(G2pError::dim("add_const", self.shape(a), &[c.len()]));
        }
        let out = self.value(a).iter().zip(c).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::AddConst(a))
    }

    /// Multiplies elementwise by a constant array (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(G2pError::dim("mul_const", self.shape(a), &[c.len()]));
        }
        let out = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::MulConst(a, c))
    }

    /// Scales each row `r` of `a` by the constant `factors[r]`.
    pub fn mul_rows(&mut self, a: Var, factors: &[T]) -> Result<Var> {
        let (m, n) = self.dims(a, "mul_rows")?;
        if factors.len() != m {
            return Err(G2pError::dim("mul_rows", self.shape(a), &[factors.len()]));
        }
        let c = factors
            .iter()
            .flat_map(|&f| std::iter::repeat_n(f, n))
            .collect();
        self.mul_const(a, c)
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), op)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.softmax_masked(a, &vec![true; n])
    }

    /// Row-wise softmax restricted to positions where `mask` is set; masked
    /// positions output exactly zero. Every row needs at least one open position.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(a, "softmax")?;
        if n == 0 {
            return Err(G2pError::dim("softmax", self.shape(a), &[]));
        }
        if mask.len() != m * n {
            return Err(G2pError::dim("softmax", self.shape(a), &[mask.len()]));
        }
        let x = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let open = &mask[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(open)
                .filter(|(_, &o)| o)
                .map(|(&v, _)| v)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or_else(|| G2pError::Contract(format!("softmax row {r} fully masked")))?;
            let dst = &mut out[r * n..(r + 1) * n];
            let mut total = T::zero();
            for ((d, &v), &o) in dst.iter_mut().zip(row).zip(open) {
                if o {
                    *d = (v - max).exp();
                    total += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::Softmax(a))
    }

    /// Row-wise `log(softmax(a))`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "log_softmax")?;
        if n == 0 {
            return Err(G2pError::dim("log_softmax", self.shape(a), &[]));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for row in x.chunks_exact(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |s, e| s + e).ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::LogSoftmax(a))
    }

    /// Concatenates along the last axis. All parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| G2pError::Contract("concat of zero tensors".into()))?;
        let (m, _) = self.dims(first, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p, "concat")?;
            if pm != m {
                return Err(G2pError::dim("concat", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rank1 = parts.iter().all(|&p| self.shape(p).len() == 1);
        let shape = if rank1 { vec![total] } else { vec![m, total] };
        self.push(shape, Cow::Owned(out), Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a, "slice")?;
        if start + len > n {
            return Err(G2pError::dim("slice", self.shape(a), &[start, len]));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&x[r * n + start..r * n + start + len]);
        }
        let shape = if self.shape(a).len() == 1 { vec![len] } else { vec![m, len] };
        self.push(shape, Cow::Owned(out), Op::Slice { src: a, start })
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = self.dims(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(G2pError::Vocabulary(format!(
                "id {bad} out of range for table with {v} rows"
            )));
        }
        let x = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&x[i * e..(i + 1) * e]);
        }
        self.push(
            vec![ids.len(), e],
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Picks element `idx[r]` from each row `r`; output shape `[m]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a, "pick")?;
        if idx.len() != m || idx.iter().any(|&i| i >= n) {
            return Err(G2pError::dim("pick", self.shape(a), &[idx.len()]));
        }
        let x = self.value(a);
        let out = idx.iter().enumerate().map(|(r, &i)| x[r * n + i]).collect();
        self.push(
            vec![m],
            Cow::Owned(out),
            Op::Pick {
                src: a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a))
    }

    /// `out[b] = sum_i alpha[b, i] * states[i][b]`, with `alpha: [B x n]` and
    /// each of the `n` states `[B x H]`.
    pub fn weighted_sum(&mut self, alpha: Var, states: &[Var]) -> Result<Var> {
        let (b, n) = self.dims(alpha, "weighted_sum")?;
        if states.len() != n || n == 0 {
            return Err(G2pError::dim("weighted_sum", self.shape(alpha), &[states.len()]));
        }
        let (sb, h) = self.dims(states[0], "weighted_sum")?;
        for &s in states {
            if self.dims(s, "weighted_sum")? != (sb, h) || sb != b {
                return Err(G2pError::dim("weighted_sum", self.shape(alpha), self.shape(s)));
            }
        }
        let a = self.value(alpha);
        let mut out = vec![T::zero(); b * h];
        for (i, &s) in states.iter().enumerate() {
            let sv = self.value(s);
            for r in 0..b {
                let w = a[r * n + i];
                for (o, &x) in out[r * h..(r + 1) * h].iter_mut().zip(&sv[r * h..(r + 1) * h]) {
                    *o += w * x;
                }
            }
        }
        self.push(
            vec![b, h],
            Cow::Owned(out),
            Op::WeightedSum {
                alpha,
                states: states.to_vec(),
            },
        )
    }

    /// Repeats a column of `m` values `n` times: `[m] -> [m x n]`.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        let m = x.len();
        let out = x.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        self.push(vec![m, n], Cow::Owned(out), Op::RepeatCols(a))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(G2pError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if self.check_finite && g.iter().any(|v| !v.is_finite()) {
                return Err(G2pError::NonFinite(format!("backward of {}", node.op.name())));
            }
            visited.push(i);
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a)).unwrap();
                let n = node.shape[1];
                if self.wants(*a) {
                    gemm_nt(g, self.value(*b), m, n, k, self.slot(grads, *a));
                }
                if self.wants(*b) {
                    gemm_tn(self.value(*a), g, m, k, n, self.slot(grads, *b));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(self.shape(*a)).unwrap();
                let n = node.shape[1];
                if self.wants(*a) {
                    gemm_nn(g, self.value(*b), m, n, k, self.slot(grads, *a));
                }
                if self.wants(*b) {
                    gemm_tn(g, self.value(*a), m, n, k, self.slot(grads, *b));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, &g), &y)| *d += g * y)
                });
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, &g), &x)| *d += g * x)
                });
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |d| add_into(d, g));
                let n = self.value(*row).len().max(1);
                self.acc(grads, *row, |d| {
                    for chunk in g.chunks_exact(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *k));
            }
            Op::AddConst(a) => self.acc(grads, *a, |d| add_into(d, g)),
            Op::MulConst(a, c) => {
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(c).for_each(|((d, &g), &c)| *d += g * c)
                });
            }
            Op::Tanh(a) => self.acc(grads, *a, |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(out.iter())
                    .for_each(|((d, &g), &y)| *d += g * (T::one() - y * y))
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(out.iter())
                    .for_each(|((d, &g), &y)| *d += g * y * (T::one() - y))
            }),
            Op::Exp(a) => self.acc(grads, *a, |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(out.iter())
                    .for_each(|((d, &g), &y)| *d += g * y)
            }),
            Op::Softmax(a) => {
                let n = *node.shape.last().unwrap_or(&1);
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.chunks_exact(n)) {
                        let dot = g.iter().zip(y).fold(T::zero(), |s, (&g, &y)| s + g * y);
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = *node.shape.last().unwrap_or(&1);
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.chunks_exact(n)) {
                        let total = g.iter().fold(T::zero(), |s, &g| s + g);
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += g - y.exp() * total;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let m = dims2(&node.shape).unwrap().0;
                let total = *node.shape.last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = dims2(self.shape(p)).unwrap().1;
                    self.acc(grads, p, |d| {
                        for r in 0..m {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { src, start } => {
                let (m, n) = dims2(self.shape(*src)).unwrap();
                let len = *node.shape.last().unwrap();
                self.acc(grads, *src, |d| {
                    for r in 0..m {
                        add_into(
                            &mut d[r * n + start..r * n + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::Gather { table, ids } => {
                let e = node.shape[1];
                self.acc(grads, *table, |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut d[i * e..(i + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                });
            }
            Op::Pick { src, idx } => {
                let n = dims2(self.shape(*src)).unwrap().1;
                self.acc(grads, *src, |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * n + i] += g[r];
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::WeightedSum { alpha, states } => {
                let (b, n) = dims2(self.shape(*alpha)).unwrap();
                let h = node.shape[1];
                let av = self.value(*alpha);
                if self.wants(*alpha) {
                    let d = self.slot(grads, *alpha);
                    for (i, &s) in states.iter().enumerate() {
                        let sv = self.value(s);
                        for r in 0..b {
                            d[r * n + i] += dot(&g[r * h..(r + 1) * h], &sv[r * h..(r + 1) * h]);
                        }
                    }
                }
                for (i, &s) in states.iter().enumerate() {
                    self.acc(grads, s, |d| {
                        for r in 0..b {
                            let w = av[r * n + i];
                            for (d, &g) in d[r * h..(r + 1) * h].iter_mut().zip(&g[r * h..(r + 1) * h]) {
                                *d += w * g;
                            }
                        }
                    });
                }
            }
            Op::RepeatCols(a) => {
                let n = node.shape[1];
                self.acc(grads, *a, |d| {
                    for (d, chunk) in d.iter_mut().zip(g.chunks_exact(n.max(1))) {
                        *d += chunk.iter().fold(T::zero(), |s, &v| s + v);
                    }
                });
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if self.wants(v) {
            f(self.slot(grads, v));
        }
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::MulConst(a, _)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Sum(a)
        | Op::RepeatCols(a) => vec![*a],
        Op::Concat(parts) => parts.clone(),
        Op::Slice { src, .. } | Op::Pick { src, .. } => vec![*src],
        Op::Gather { table, .. } => vec![*table],
        Op::WeightedSum { alpha, states } => {
            let mut v = vec![*alpha];
            v.extend_from_slice(states);
            v
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out[m x n] += a[m x k] . b[k x n]`
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x n] += a[m x k] . b[n x k]^T`
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k x n] += a[m x k]^T . b[m x n]`
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
