//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value plus whatever it needs
//! to replay its adjoint. `backward` walks the nodes in strict reverse order,
//! so a node's gradient is complete before it is pushed into its inputs.
//! Frozen parameters are ordinary non-differentiable leaves: gradients flow
//! through the ops that consume them but are never materialized for them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnShape};
use crate::par::Exec;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param,
    MatMul { a: Var, b: Var },
    MatMulT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f32 },
    Sum { x: Var },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<u32> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<f32> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<f32> },
    Reshape { x: Var },
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { parts: Vec<(Var, Vec<usize>)> },
    RowScale { x: Var, s: Var },
    GatherElems { x: Var, idx: Vec<usize> },
    TopKRenorm { probs: Var, indices: Vec<usize>, k: usize },
    Fuse { w: Var, moe: Var, shared: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every differentiable node, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Vec<f32>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }
}

fn rows_cols(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Shape(format!("{op} expects a rank-2 tensor, got {s:?}"))),
    }
}

fn gelu_parts(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape { nodes: Vec::new(), bound: HashMap::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Const => false,
            Op::Param => unreachable!("params are pushed by Tape::param"),
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn out(&self, shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).expect("op produced consistent shape")
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Const, &[])
    }

    /// Binds a stored parameter; repeated binds of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let mut value = p.tensor.clone();
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Param,
            requires_grad: !p.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// A constant copy of `x`: gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a), "matmul")?;
        let (k2, n) = rows_cols(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul(self.exec, self.value(a).data(), self.value(b).data(), m, k, n, &mut data);
        let t = self.out(&[m, n], data);
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a), "matmul_t")?;
        let (n, k2) = rows_cols(self.value(b), "matmul_t")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_t",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul_t(self.exec, self.value(a).data(), self.value(b).data(), m, k, n, &mut data);
        let t = self.out(&[m, n], data);
        Ok(self.push(t, Op::MatMulT { a, b }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = self.out(self.value(a).shape(), data);
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = self.out(self.value(a).shape(), data);
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a `[n]` bias to every row of `[m, n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.value(x), "add_bias")?;
        if self.value(bias).numel() != n {
            return Err(Error::Dimension {
                op: "add_bias",
                left: self.value(x).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let t = self.out(self.value(x).shape(), data);
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = self.out(self.value(x).shape(), data);
        self.push(t, Op::Scale { x, c }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu_parts(v).0).collect();
        let t = self.out(self.value(x).shape(), data);
        self.push(t, Op::Gelu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let t = self.out(self.value(x).shape(), data);
        self.push(t, Op::Sigmoid { x }, &[x])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension { op: "softmax", left: shape, right: vec![axis] });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    data[idx(j)] /= z;
                }
            }
        }
        let t = self.out(&shape, data);
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Row-wise layer normalization of `[m, n]` with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(x), "layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: self.value(x).shape().to_vec(),
                right: self.value(gamma).shape().to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                data[r * n + j] = xh * g[j] + b[j];
            }
        }
        let t = self.out(&[m, n], data);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Looks up rows of `table: [V, H]`, producing `[ids.len(), H]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, h) = rows_cols(self.value(table), "embedding")?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * h);
        for (pos, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index { position: pos, value: id, bound: v });
            }
            data.extend_from_slice(&src[id * h..(id + 1) * h]);
        }
        let t = self.out(&[ids.len(), h], data);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean negative log-likelihood of `targets` under softmax of the last axis.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        let vocab = *shape.last().unwrap();
        let rows = self.value(logits).numel() / vocab;
        if shape.len() < 2 || rows != targets.len() {
            return Err(Error::Dimension { op: "cross_entropy", left: shape, right: vec![targets.len()] });
        }
        for (pos, &t) in targets.iter().enumerate() {
            if t as usize >= vocab {
                return Err(Error::Index { position: pos, value: t as usize, bound: vocab });
            }
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for (p, &l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= z;
            }
            let lse = max + z.ln();
            total += (lse - row[targets[r] as usize]) as f64;
        }
        let loss = (total / rows as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Causal multi-head attention over `[batch*seq, hidden]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, hidden) = rows_cols(self.value(q), "attention")?;
        for other in [k, v] {
            self.same_shape("attention", q, other)?;
        }
        if rows != batch * seq || heads == 0 || hidden % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: rows {rows} != batch {batch} x seq {seq}, or hidden {hidden} not divisible by {heads} heads"
            )));
        }
        let shape = AttnShape { batch, seq, heads, hidden };
        let mut out = vec![0.0; rows * hidden];
        let mut probs = vec![0.0; shape.probs_len()];
        kernels::attention_forward(
            self.exec,
            shape,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &mut out,
            &mut probs,
        );
        let t = self.out(&[rows, hidden], out);
        Ok(self.push(t, Op::Attention { q, k, v, shape, probs }, &[q, k, v]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Selects rows of `[m, n]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = rows_cols(self.value(x), "gather_rows")?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for (pos, &r) in rows.iter().enumerate() {
            if r >= m {
                return Err(Error::Index { position: pos, value: r, bound: m });
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Sums each part's rows into a zero `[n_rows, width]` output at the
    /// listed row positions.
    pub fn scatter_rows(&mut self, n_rows: usize, width: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let mut data = vec![0.0; n_rows * width];
        let mut inputs = Vec::with_capacity(parts.len());
        for (v, rows) in &parts {
            let (m, n) = rows_cols(self.value(*v), "scatter_rows")?;
            if n != width || m != rows.len() {
                return Err(Error::Dimension {
                    op: "scatter_rows",
                    left: self.value(*v).shape().to_vec(),
                    right: vec![rows.len(), width],
                });
            }
            let src = self.value(*v).data();
            for (pos, &r) in rows.iter().enumerate() {
                if r >= n_rows {
                    return Err(Error::Index { position: pos, value: r, bound: n_rows });
                }
                kernels::axpy(1.0, &src[pos * n..(pos + 1) * n], &mut data[r * width..(r + 1) * width]);
            }
            inputs.push(*v);
        }
        let t = self.out(&[n_rows, width], data);
        Ok(self.push(t, Op::ScatterRows { parts }, &inputs))
    }

    /// Multiplies row `r` of `[m, n]` by `s[r]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(x), "row_scale")?;
        if self.value(s).numel() != m {
            return Err(Error::Dimension {
                op: "row_scale",
                left: self.value(x).shape().to_vec(),
                right: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &c) in data.chunks_mut(n).zip(sv) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        let t = self.out(&[m, n], data);
        Ok(self.push(t, Op::RowScale { x, s }, &[x, s]))
    }

    /// Picks flat elements of `x` into a `[idx.len()]` vector.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len());
        for (pos, &i) in idx.iter().enumerate() {
            if i >= src.len() {
                return Err(Error::Index { position: pos, value: i, bound: src.len() });
            }
            data.push(src[i]);
        }
        let t = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(t, Op::GatherElems { x, idx: idx.to_vec() }, &[x]))
    }

    /// From row-stochastic `probs: [N, E]` keeps the `k` listed columns per
    /// row (`indices` is `[N*k]`) and renormalizes them to sum to one.
    pub fn topk_renorm(&mut self, probs: Var, indices: &[usize], k: usize) -> Result<Var> {
        let (n, e) = rows_cols(self.value(probs), "topk_renorm")?;
        if indices.len() != n * k || k == 0 {
            return Err(Error::Dimension { op: "topk_renorm", left: vec![n, e], right: vec![indices.len(), k] });
        }
        if let Some(pos) = indices.iter().position(|&i| i >= e) {
            return Err(Error::Index { position: pos, value: indices[pos], bound: e });
        }
        let p = self.value(probs).data();
        let mut data = vec![0.0; n * k];
        for r in 0..n {
            let sel = &indices[r * k..(r + 1) * k];
            let s: f32 = sel.iter().map(|&j| p[r * e + j]).sum();
            for (slot, &j) in sel.iter().enumerate() {
                data[r * k + slot] = p[r * e + j] / s;
            }
        }
        let t = self.out(&[n, k], data);
        Ok(self.push(t, Op::TopKRenorm { probs, indices: indices.to_vec(), k }, &[probs]))
    }

    /// `w · moe + (1 − w) · shared` with scalar `w`.
    pub fn fuse(&mut self, w: Var, moe: Var, shared: Var) -> Result<Var> {
        if !self.value(w).is_scalar() {
            return Err(Error::Shape(format!("fusion weight must be scalar, got {:?}", self.value(w).shape())));
        }
        self.same_shape("fusion", moe, shared)?;
        let wv = self.value(w).item();
        let data = self
            .value(moe)
            .data()
            .iter()
            .zip(self.value(shared).data())
            .map(|(a, b)| wv * a + (1.0 - wv) * b)
            .collect();
        let t = self.out(self.value(moe).shape(), data);
        Ok(self.push(t, Op::Fuse { w, moe, shared }, &[w, moe, shared]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Grads> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads(grads));
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads(grads))
    }

    /// Reverse pass that stores gradients on the store's trainable entries.
    /// Trainable parameters not reached from `loss` get a zero gradient.
    pub fn backward(&self, loss: Var, params: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let g = match self.bound.get(name).and_then(|v| grads.get(*v)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.tensor.numel()],
            };
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adjoint(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let exec = self.exec;
        match &node.op {
            Op::Const | Op::Param => {}
            Op::MatMul { a, b } => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_t(exec, g, self.value(*b).data(), m, n, k, &mut da);
                    accumulate(grads, *a, &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(exec, self.value(*a).data(), g, m, k, n, &mut db);
                    accumulate(grads, *b, &db);
                }
            }
            Op::MatMulT { a, b } => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).shape()[0];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(exec, g, self.value(*b).data(), m, n, k, &mut da);
                    accumulate(grads, *a, &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn(exec, g, self.value(*a).data(), m, n, k, &mut db);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let d: Vec<f32> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &d);
                }
                if self.wants(*b) {
                    let d: Vec<f32> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g);
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        kernels::axpy(1.0, row, &mut db);
                    }
                    accumulate(grads, *bias, &db);
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    let d: Vec<f32> = g.iter().map(|v| v * c).collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let d = vec![g[0]; self.value(*x).numel()];
                    accumulate(grads, *x, &d);
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let d: Vec<f32> =
                        self.value(*x).data().iter().zip(g).map(|(&v, gi)| gelu_parts(v).1 * gi).collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Sigmoid { x } => {
                if self.wants(*x) {
                    let d: Vec<f32> = node.value.data().iter().zip(g).map(|(&y, gi)| y * (1.0 - y) * gi).collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                    let y = node.value.data();
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + ii;
                            let s: f32 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] = y[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                    accumulate(grads, *x, &d);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).numel();
                let m = rstd.len();
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                    accumulate(grads, *gamma, &dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        kernels::axpy(1.0, row, &mut db);
                    }
                    accumulate(grads, *beta, &db);
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let gx = gr[j] * gam[j];
                            s1 += gx;
                            s2 += gx * xr[j];
                        }
                        let nf = n as f32;
                        for j in 0..n {
                            let gx = gr[j] * gam[j];
                            dx[r * n + j] = rstd[r] / nf * (nf * gx - s1 - xr[j] * s2);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let h = self.value(*table).shape()[1];
                    let buf = slot(grads, *table, self.value(*table).numel());
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        kernels::axpy(1.0, &g[r * h..(r + 1) * h], &mut buf[id * h..(id + 1) * h]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let vocab = probs.len() / targets.len();
                    let c = g[0] / targets.len() as f32;
                    let mut d: Vec<f32> = probs.iter().map(|p| p * c).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * vocab + t as usize] -= c;
                    }
                    accumulate(grads, *logits, &d);
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let len = node.value.numel();
                let (mut dq, mut dk, mut dv) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
                kernels::attention_backward(
                    exec,
                    *shape,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        accumulate(grads, var, &d);
                    }
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::GatherRows { x, rows } => {
                if self.wants(*x) {
                    let n = self.value(*x).shape()[1];
                    let buf = slot(grads, *x, self.value(*x).numel());
                    for (pos, &r) in rows.iter().enumerate() {
                        kernels::axpy(1.0, &g[pos * n..(pos + 1) * n], &mut buf[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::ScatterRows { parts } => {
                let width = node.value.shape()[1];
                for (v, rows) in parts {
                    if !self.wants(*v) {
                        continue;
                    }
                    let mut d = vec![0.0; rows.len() * width];
                    for (pos, &r) in rows.iter().enumerate() {
                        d[pos * width..(pos + 1) * width].copy_from_slice(&g[r * width..(r + 1) * width]);
                    }
                    accumulate(grads, *v, &d);
                }
            }
            Op::RowScale { x, s } => {
                let n = self.value(*x).shape()[1];
                if self.wants(*x) {
                    let sv = self.value(*s).data();
                    let mut d = g.to_vec();
                    for (row, &c) in d.chunks_mut(n).zip(sv) {
                        row.iter_mut().for_each(|v| *v *= c);
                    }
                    accumulate(grads, *x, &d);
                }
                if self.wants(*s) {
                    let xv = self.value(*x).data();
                    let d: Vec<f32> = g.chunks(n).zip(xv.chunks(n)).map(|(gr, xr)| kernels::dot(gr, xr)).collect();
                    accumulate(grads, *s, &d);
                }
            }
            Op::GatherElems { x, idx } => {
                if self.wants(*x) {
                    let buf = slot(grads, *x, self.value(*x).numel());
                    for (pos, &i) in idx.iter().enumerate() {
                        buf[i] += g[pos];
                    }
                }
            }
            Op::TopKRenorm { probs, indices, k } => {
                if self.wants(*probs) {
                    let e = self.value(*probs).shape()[1];
                    let p = self.value(*probs).data();
                    let buf = slot(grads, *probs, p.len());
                    for r in 0..indices.len() / k {
                        let sel = &indices[r * k..(r + 1) * k];
                        let s: f32 = sel.iter().map(|&j| p[r * e + j]).sum();
                        let gp: f32 = sel.iter().enumerate().map(|(slot, &j)| g[r * k + slot] * p[r * e + j]).sum();
                        for (slot, &j) in sel.iter().enumerate() {
                            buf[r * e + j] += g[r * k + slot] / s - gp / (s * s);
                        }
                    }
                }
            }
            Op::Fuse { w, moe, shared } => {
                let wv = self.value(*w).item();
                if self.wants(*moe) {
                    let d: Vec<f32> = g.iter().map(|x| x * wv).collect();
                    accumulate(grads, *moe, &d);
                }
                if self.wants(*shared) {
                    let d: Vec<f32> = g.iter().map(|x| x * (1.0 - wv)).collect();
                    accumulate(grads, *shared, &d);
                }
                if self.wants(*w) {
                    let a = self.value(*moe).data();
                    let b = self.value(*shared).data();
                    let mut acc = 0.0f64;
                    for ((gi, ai), bi) in g.iter().zip(a).zip(b) {
                        acc += (gi * (ai - bi)) as f64;
                    }
                    accumulate(grads, *w, &[acc as f32]);
                }
            }
        }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, d: &[f32]) {
    match &mut grads[v.0] {
        Some(buf) => kernels::axpy(1.0, d, buf),
        empty @ None => *empty = Some(d.to_vec()),
    }
}
