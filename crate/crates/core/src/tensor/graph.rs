use super::kernels;
use super::{Real, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian rule for a user-registered op: given the input values, the
/// output value and the output cotangent, return one cotangent per input.
pub type VjpFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    CausalSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Custom(Vec<Var>, VjpFn<T>),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Operation tape. Nodes are appended in evaluation order, which is a
/// topological order of the computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    record: bool,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
            backward_done: false,
        }
    }

    /// A graph that never tracks gradients; used for inference.
    pub fn no_grad() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by every node value (parameters, constants, activations).
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum::<usize>() * T::DTYPE.size()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.record,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Move a node's value out, leaving an empty placeholder.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(
            &mut self.nodes[v.0].value,
            Tensor::zeros(&[1]),
        )
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`]; `None` for
    /// nodes that do not require gradients or are unreachable from the output.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when no path reached the node.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, inputs: &[Var], kind: Op<T>) -> Result<Var, TensorError> {
        value.check_finite(op)?;
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { kind } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(TensorError::Invalid(format!("{op} expects a matrix, got shape {s:?}"))),
        }
    }

    /// `A·B`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        self.push("matmul", out, &[a, b], Op::MatMul(a, b))
    }

    /// `A·Bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        self.push("matmul_nt", out, &[a, b], Op::MatMulNt(a, b))
    }

    /// Row-wise linear map `x·Wᵀ` with `W (out × in)`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix(x, "linear")?;
        let (n, k2) = self.matrix(w, "linear")?;
        if k != k2 {
            return Err(shape_err("linear", self.shape(x), self.shape(w)));
        }
        let data = kernels::matmul_nt(self.value(x).data(), self.value(w).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        self.push("linear", out, &[x, w], Op::Linear(x, w))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", out, &[a, b], Op::Add(a, b))
    }

    /// Adds the vector `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let cols = self.value(x).cols();
        if self.value(row).len() != cols {
            return Err(shape_err("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|xs| xs.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_row", out, &[x, row], Op::AddRow(x, row))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", out, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, &[x], Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", out, &[x], Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(kernels::gelu);
        self.push("gelu", out, &[x], Op::Gelu(x))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let d = self.value(x).cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err("layernorm", self.shape(x), self.shape(gamma)));
        }
        if eps < 0.0 {
            return Err(TensorError::Invalid(format!("layernorm eps must be non-negative, got {eps}")));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xs.len() / d;
        let inv_d = T::one() / T::c(d as f64);
        let keep = self.record;
        let mut xhat = Vec::with_capacity(if keep { xs.len() } else { 0 });
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let denom = var + T::c(eps);
            if denom <= T::zero() {
                return Err(TensorError::DivisionByZero { op: "layernorm" });
            }
            let r = T::one() / denom.sqrt();
            inv_std.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                if keep {
                    xhat.push(h);
                }
                out.push(g[j] * h + b[j]);
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let kind = if self.record {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        } else {
            Op::Leaf
        };
        self.push("layernorm", out, &[x, gamma, beta], kind)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = super::softmax_rows(self.value(x));
        self.push("softmax", out, &[x], Op::Softmax(x))
    }

    /// Row-wise softmax over the lower triangle: row `i` only normalizes over
    /// columns `0..=i + offset`, the rest are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, m) = self.matrix(x, "causal_softmax")?;
        let offset = m.saturating_sub(n);
        let mut out = self.value(x).clone();
        for (i, row) in out.data_mut().chunks_mut(m).enumerate() {
            let visible = (i + offset + 1).min(m);
            kernels::softmax_in_place(&mut row[..visible]);
            for v in &mut row[visible..] {
                *v = T::zero();
            }
        }
        self.push("causal_softmax", out, &[x], Op::CausalSoftmax(x))
    }

    /// Mean cross-entropy of softmax(logits) against `targets`; rows with a
    /// `None` target are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, TensorError> {
        let (n, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::Invalid("cross_entropy over an empty target set".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (i, (row, t)) in probs.chunks_mut(v).zip(targets).enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let logits_row = &self.nodes[logits.0].value.data()[i * v..(i + 1) * v];
            let max = logits_row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = logits_row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - logits_row[t];
            kernels::softmax_in_place(row);
        }
        loss = loss / T::c(count as f64);
        let kind = if self.record {
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            }
        } else {
            Op::Leaf
        };
        self.push("cross_entropy", Tensor::scalar(loss), &[logits], kind)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        self.push("concat_rows", out, parts, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (n, d) = self.matrix(x, "slice_rows")?;
        if start >= end || end > n {
            return Err(TensorError::Invalid(format!("slice_rows {start}..{end} out of 0..{n}")));
        }
        let data = self.value(x).data()[start * d..end * d].to_vec();
        let out = Tensor::new(vec![end - start, d], data)?;
        self.push("slice_rows", out, &[x], Op::SliceRows(x, start))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.matrix(table, "gather")?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather with no ids".into()));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "gather",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push("gather", out, &[table], Op::Gather(table, ids.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, &[x], Op::Reshape(x))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Registers an op with a caller-supplied forward value and vjp rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, vjp: VjpFn<T>) -> Result<Var, TensorError> {
        self.push("custom", value, inputs, Op::Custom(inputs.to_vec(), vjp))
    }

    /// Reverse sweep from `output` seeded with `seed`, accumulating into every
    /// reachable node that requires gradients.
    pub fn backward(&mut self, output: Var, seed: &Tensor<T>) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        if seed.shape() != self.shape(output) {
            return Err(shape_err("backward seed", self.shape(output), seed.shape()));
        }
        self.backward_done = true;
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.accumulate(output, seed.data());
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[idx].take() else { continue };
            self.propagate(idx, &dy);
            self.grads[idx] = Some(dy);
        }
        // drop intermediate cotangents; only leaves keep gradients
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(())
    }

    /// Scalar convenience: backward with seed 1.
    pub fn backward_scalar(&mut self, output: Var) -> Result<(), TensorError> {
        let seed = Tensor::full(self.shape(output), T::one());
        self.backward(output, &seed)
    }

    fn accumulate(&mut self, v: Var, g: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => add_into(existing, g),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn propagate(&mut self, idx: usize, dy: &[T]) {
        let mut contributions: Vec<(Var, Vec<T>)> = Vec::new();
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                contributions.push((*a, kernels::matmul_nt(dy, val(*b).data(), m, n, k)));
                contributions.push((*b, kernels::matmul_tn(val(*a).data(), dy, m, k, n)));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                contributions.push((*a, kernels::matmul(dy, val(*b).data(), m, n, k)));
                contributions.push((*b, kernels::matmul_tn(dy, val(*a).data(), m, n, k)));
            }
            Op::Linear(x, w) => {
                let (m, k) = (val(*x).rows(), val(*x).cols());
                let n = val(*w).rows();
                contributions.push((*x, kernels::matmul(dy, val(*w).data(), m, n, k)));
                contributions.push((*w, kernels::matmul_tn(dy, val(*x).data(), m, n, k)));
            }
            Op::Add(a, b) => {
                contributions.push((*a, dy.to_vec()));
                contributions.push((*b, dy.to_vec()));
            }
            Op::AddRow(x, r) => {
                let cols = val(*r).len();
                let mut dr = vec![T::zero(); cols];
                for chunk in dy.chunks(cols) {
                    add_into(&mut dr, chunk);
                }
                contributions.push((*x, dy.to_vec()));
                contributions.push((*r, dr));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                contributions.push((*a, dy.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                contributions.push((*b, dy.iter().zip(av).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale(x, s) => {
                contributions.push((*x, dy.iter().map(|&g| g * *s).collect()));
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                contributions.push((*x, dx));
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                let dx = dy.iter().zip(xv).map(|(&g, &v)| g * kernels::gelu_grad(v)).collect();
                contributions.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = val(*gamma).data();
                let d = g.len();
                let inv_d = T::one() / T::c(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = Vec::with_capacity(dy.len());
                let mut dxhat = vec![T::zero(); d];
                for ((gy, h), &r) in dy.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_h = T::zero();
                    for j in 0..d {
                        dgamma[j] = dgamma[j] + gy[j] * h[j];
                        dbeta[j] = dbeta[j] + gy[j];
                        dxhat[j] = gy[j] * g[j];
                        mean_dxhat = mean_dxhat + dxhat[j];
                        mean_dxhat_h = mean_dxhat_h + dxhat[j] * h[j];
                    }
                    mean_dxhat = mean_dxhat * inv_d;
                    mean_dxhat_h = mean_dxhat_h * inv_d;
                    for j in 0..d {
                        dx.push(r * (dxhat[j] - mean_dxhat - h[j] * mean_dxhat_h));
                    }
                }
                contributions.push((*x, dx));
                contributions.push((*gamma, dgamma));
                contributions.push((*beta, dbeta));
            }
            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = Vec::with_capacity(dy.len());
                for (gy, yr) in dy.chunks(cols).zip(y.chunks(cols)) {
                    let s = kernels::dot(gy, yr);
                    dx.extend(gy.iter().zip(yr).map(|(&g, &p)| p * (g - s)));
                }
                contributions.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = val(*logits).cols();
                let scale = dy[0] / T::c(*count as f64);
                let mut dx = vec![T::zero(); probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        dx[i * v + j] = probs[i * v + j] * scale;
                    }
                    dx[i * v + t] = dx[i * v + t] - scale;
                }
                contributions.push((*logits, dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    contributions.push((*p, dy[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let src = val(*x);
                let d = src.cols();
                let mut dx = vec![T::zero(); src.len()];
                dx[start * d..start * d + dy.len()].copy_from_slice(dy);
                contributions.push((*x, dx));
            }
            Op::Gather(table, ids) => {
                let t = val(*table);
                let d = t.cols();
                let mut dt = vec![T::zero(); t.len()];
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &dy[i * d..(i + 1) * d]);
                }
                contributions.push((*table, dt));
            }
            Op::Reshape(x) => contributions.push((*x, dy.to_vec())),
            Op::Sum(x) => contributions.push((*x, vec![dy[0]; val(*x).len()])),
            Op::Custom(inputs, vjp) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let grads = vjp(&values, &node.value, dy);
                contributions.extend(inputs.iter().copied().zip(grads));
            }
        }
        for (v, g) in contributions {
            self.accumulate(v, &g);
        }
    }
}
