//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Each builder method runs the forward kernel immediately, records the node,
//! and validates shapes and finiteness. `backward` replays the tape once in
//! reverse, accumulating vector-Jacobian products; the graph itself is not
//! mutated, so the node values stay readable afterwards.
//!
//! The op set is deliberately small and fully covered by the
//! finite-difference suite; there is no broadcasting beyond bias-add.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, ensure_finite, Tensor};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScalarAffine { x: NodeId, scale: f64 },
    MaskedSoftmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Gather { table: NodeId, indices: Vec<usize> },
    Gelu { x: NodeId },
    Relu { x: NodeId },
    Concat { parts: Vec<NodeId> },
    LogSumExp { x: NodeId },
    GaussianLogDensity { x: NodeId, means: NodeId, scales: NodeId },
    Exp { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Reshape { x: NodeId },
    Sum { x: NodeId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Node ids of the parameter leaves bound from a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub ids: Vec<NodeId>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Constant input leaf (no gradient).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Register every tensor of `store` as a parameter leaf, in store order.
    pub fn bind(&mut self, store: &ParamStore) -> BoundParams {
        let ids = (0..store.len())
            .map(|i| self.param(store.at(i).clone()))
            .collect();
        BoundParams { ids }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── Forward builders ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`; `b` is stored row-major as `[n, k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matmul expects matrices, got {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (n, kb) = if transpose_b {
            (tb.shape()[0], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[0])
        };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims {} vs {}",
                k, kb
            )));
        }
        let out = tensor::matmul(ta.data(), tb.data(), m, k, n, transpose_b);
        let value = Tensor::matrix(m, n, out)?;
        ensure_finite(&value, "matmul")?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, transpose_b }, value, rg))
    }

    /// Elementwise sum; also accepts `[r, c] + [c]` as a bias add.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            let (r, c) = ta.rows_cols();
            if tb.shape() != [c] {
                return Err(Error::Shape(format!(
                    "add: {:?} + {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let mut data = ta.data().to_vec();
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] += tb.data()[j];
                }
            }
            Tensor::new(ta.shape().to_vec(), data)?
        };
        ensure_finite(&value, "add")?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        ensure_finite(&value, "mul")?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, value, rg))
    }

    /// `scale * x + shift`, elementwise with constant coefficients.
    pub fn scalar_affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        let data = tx.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        ensure_finite(&value, "scalar-affine")?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::ScalarAffine { x, scale }, value, rg))
    }

    /// Row-wise softmax with a 0/1 mask over the last axis. The mask is a
    /// constant, not a differentiable input.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &Tensor) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        if tx.shape() != mask.shape() {
            return Err(Error::Shape(format!(
                "masked-softmax: logits {:?} vs mask {:?}",
                tx.shape(),
                mask.shape()
            )));
        }
        let (r, c) = tx.rows_cols();
        let out = tensor::masked_softmax_rows(tx.data(), mask.data(), r, c)?;
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        ensure_finite(&value, "masked-softmax")?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::MaskedSoftmax { x }, value, rg))
    }

    /// Plain softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let ones = Tensor::new(
            self.nodes[x].value.shape().to_vec(),
            vec![1.0; self.nodes[x].value.len()],
        )?;
        self.masked_softmax(x, &ones)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
        );
        let (r, c) = tx.rows_cols();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::Shape(format!(
                "layer-norm: x {:?}, gamma {:?}, beta {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let out = tensor::layer_norm_rows(tx.data(), tg.data(), tb.data(), r, c, LAYER_NORM_EPS);
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        ensure_finite(&value, "layer-norm")?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, value, rg))
    }

    /// Row gather: `out[i] = table[indices[i]]`. Used both for embedding
    /// lookup and for selecting rows of intermediate states.
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let tt = &self.nodes[table].value;
        if tt.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "gather expects a matrix table, got {:?}",
                tt.shape()
            )));
        }
        let (n, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            if idx >= n {
                return Err(Error::Index(format!("gather index {} >= {}", idx, n)));
            }
            data.extend_from_slice(&tt.data()[idx * d..(idx + 1) * d]);
        }
        let value = Tensor::matrix(indices.len(), d, data)?;
        let rg = self.nodes[table].requires_grad;
        Ok(self.push(
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        let data = tx.data().iter().map(|&v| tensor::gelu(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        ensure_finite(&value, "gelu")?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::Gelu { x }, value, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::Relu { x }, value, rg))
    }

    /// Concatenate along the last axis. Inputs must agree on all other axes.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let rows = self.nodes[parts[0]].value.rows_cols().0;
        let rank = self.nodes[parts[0]].value.shape().len();
        let mut total_cols = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            if t.rows_cols().0 != rows || t.shape().len() != rank {
                return Err(Error::Shape("concat: incompatible shapes".into()));
            }
            total_cols += t.rows_cols().1;
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p].value.row(r));
            }
        }
        let shape = if rank == 1 {
            vec![total_cols]
        } else {
            vec![rows, total_cols]
        };
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Log-sum-exp over the last axis; `[r, c] → [r]`, `[c] → [1]`.
    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        let (r, c) = tx.rows_cols();
        if c == 0 {
            return Err(Error::Shape("logsumexp over empty axis".into()));
        }
        let out = tensor::logsumexp_rows(tx.data(), r, c);
        let value = Tensor::vector(out);
        ensure_finite(&value, "log-sum-exp")?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::LogSumExp { x }, value, rg))
    }

    /// Per-component spherical Gaussian log-density:
    /// `x` is a d-vector (or 1×d), `means` is K×d, `scales` is a K-vector
    /// of positive standard deviations. Output is a K-vector.
    pub fn gaussian_log_density(
        &mut self,
        x: NodeId,
        means: NodeId,
        scales: NodeId,
    ) -> Result<NodeId> {
        let (tx, tm, ts) = (
            &self.nodes[x].value,
            &self.nodes[means].value,
            &self.nodes[scales].value,
        );
        if tm.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "gaussian-log-density means must be K x d, got {:?}",
                tm.shape()
            )));
        }
        let (k, d) = (tm.shape()[0], tm.shape()[1]);
        if tx.len() != d || ts.len() != k {
            return Err(Error::Shape(format!(
                "gaussian-log-density: x {:?}, means {:?}, scales {:?}",
                tx.shape(),
                tm.shape(),
                ts.shape()
            )));
        }
        if ts.data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain("gaussian scale must be positive".into()));
        }
        let out = tensor::gaussian_log_density(tx.data(), tm.data(), ts.data(), k, d);
        let value = Tensor::vector(out);
        ensure_finite(&value, "gaussian-log-density")?;
        let rg = self.any_grad(&[x, means, scales]);
        Ok(self.push(Op::GaussianLogDensity { x, means, scales }, value, rg))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        let data = tx.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        ensure_finite(&value, "exp")?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::Exp { x }, value, rg))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::Domain(format!("clamp bounds [{lo}, {hi}]")));
        }
        let tx = &self.nodes[x].value;
        let data = tx.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::Clamp { x, lo, hi }, value, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        if shape.iter().product::<usize>() != tx.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                tx.shape(),
                shape
            )));
        }
        let value = Tensor::new(shape, tx.data().to_vec())?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::Reshape { x }, value, rg))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        let value = Tensor::scalar(tx.data().iter().sum());
        ensure_finite(&value, "sum")?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::Sum { x }, value, rg))
    }

    /// `a - b` via scalar-affine + add.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scalar_affine(b, -1.0, 0.0)?;
        self.add(a, nb)
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].value.len();
        let s = self.sum(x)?;
        self.scalar_affine(s, 1.0 / n as f64, 0.0)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode pass from a scalar loss node. Returns per-node gradients;
    /// nodes not reached (or not requiring grad) hold `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let d_out = grads[id].take().unwrap();
            self.backward_op(id, &d_out, &mut grads);
            grads[id] = Some(d_out);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| Tensor::new(self.nodes[id].value.shape().to_vec(), data).unwrap())
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => grads[id] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, id: NodeId, d_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}

            Op::MatMul { a, b, transpose_b } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = self.nodes[id].value.shape()[1];
                if !*transpose_b {
                    // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                    if self.nodes[*a].requires_grad {
                        let da = tensor::matmul(d_out, tb.data(), m, n, k, true);
                        self.accumulate(grads, *a, &da);
                    }
                    if self.nodes[*b].requires_grad {
                        // Aᵀ·dC computed as accumulation over rows
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = ta.data()[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] += av * d_out[i * n + j];
                                }
                            }
                        }
                        self.accumulate(grads, *b, &db);
                    }
                } else {
                    // C = A·Bᵀ with B stored [n, k]: dA = dC·B, dB = dCᵀ·A
                    if self.nodes[*a].requires_grad {
                        let da = tensor::matmul(d_out, tb.data(), m, n, k, false);
                        self.accumulate(grads, *a, &da);
                    }
                    if self.nodes[*b].requires_grad {
                        let mut db = vec![0.0; n * k];
                        for i in 0..m {
                            for j in 0..n {
                                let dv = d_out[i * n + j];
                                for p in 0..k {
                                    db[j * k + p] += dv * ta.data()[i * k + p];
                                }
                            }
                        }
                        self.accumulate(grads, *b, &db);
                    }
                }
            }

            Op::Add { a, b } => {
                self.accumulate(grads, *a, d_out);
                let tb = &self.nodes[*b].value;
                if tb.len() == d_out.len() {
                    self.accumulate(grads, *b, d_out);
                } else if self.nodes[*b].requires_grad {
                    // bias add: column sums
                    let c = tb.len();
                    let r = d_out.len() / c;
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += d_out[i * c + j];
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }

            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let tb = &self.nodes[*b].value;
                    let da: Vec<f64> = d_out.iter().zip(tb.data()).map(|(d, y)| d * y).collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let ta = &self.nodes[*a].value;
                    let db: Vec<f64> = d_out.iter().zip(ta.data()).map(|(d, x)| d * x).collect();
                    self.accumulate(grads, *b, &db);
                }
            }

            Op::ScalarAffine { x, scale } => {
                let dx: Vec<f64> = d_out.iter().map(|d| scale * d).collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::MaskedSoftmax { x } => {
                let y = &self.nodes[id].value;
                let (r, c) = y.rows_cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += d_out[base + j] * y.data()[base + j];
                    }
                    for j in 0..c {
                        dx[base + j] = y.data()[base + j] * (d_out[base + j] - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::LayerNorm { x, gamma, beta } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gamma].value;
                let (r, c) = tx.rows_cols();
                let cf = c as f64;
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    let xr = &tx.data()[i * c..(i + 1) * c];
                    let mean = xr.iter().sum::<f64>() / cf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let dr = &d_out[i * c..(i + 1) * c];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let g = dr[j] * tg.data()[j];
                        sum_g += g;
                        sum_gx += g * xhat;
                        dg[j] += dr[j] * xhat;
                        db[j] += dr[j];
                    }
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let g = dr[j] * tg.data()[j];
                        dx[i * c + j] = inv * (g - sum_g / cf - xhat * sum_gx / cf);
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gamma, &dg);
                self.accumulate(grads, *beta, &db);
            }

            Op::Gather { table, indices } => {
                if self.nodes[*table].requires_grad {
                    let tt = &self.nodes[*table].value;
                    let d = tt.shape()[1];
                    let mut dt = vec![0.0; tt.len()];
                    for (row, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[idx * d + j] += d_out[row * d + j];
                        }
                    }
                    self.accumulate(grads, *table, &dt);
                }
            }

            Op::Gelu { x } => {
                let tx = &self.nodes[*x].value;
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(tx.data())
                    .map(|(d, &v)| d * tensor::gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::Relu { x } => {
                let tx = &self.nodes[*x].value;
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(tx.data())
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::Concat { parts } => {
                let rows = self.nodes[id].value.rows_cols().0;
                let widths: Vec<usize> =
                    parts.iter().map(|&p| self.nodes[p].value.rows_cols().1).collect();
                let total: usize = widths.iter().sum();
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    let w = widths[pi];
                    let offset: usize = widths[..pi].iter().sum();
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&d_out[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(grads, p, &dp);
                }
            }

            Op::LogSumExp { x } => {
                let tx = &self.nodes[*x].value;
                let y = &self.nodes[id].value;
                let (r, c) = tx.rows_cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = d_out[i] * (tx.data()[i * c + j] - y.data()[i]).exp();
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::GaussianLogDensity { x, means, scales } => {
                let tx = &self.nodes[*x].value;
                let tm = &self.nodes[*means].value;
                let ts = &self.nodes[*scales].value;
                let (k, d) = (tm.shape()[0], tm.shape()[1]);
                let mut dx = vec![0.0; d];
                let mut dm = vec![0.0; k * d];
                let mut ds = vec![0.0; k];
                for i in 0..k {
                    let sigma = ts.data()[i];
                    let inv2 = 1.0 / (sigma * sigma);
                    let mut sq = 0.0;
                    for j in 0..d {
                        let diff = tx.data()[j] - tm.data()[i * d + j];
                        sq += diff * diff;
                        let g = d_out[i] * diff * inv2;
                        dx[j] -= g;
                        dm[i * d + j] += g;
                    }
                    ds[i] += d_out[i] * (-(d as f64) / sigma + sq / (sigma * sigma * sigma));
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *means, &dm);
                self.accumulate(grads, *scales, &ds);
            }

            Op::Exp { x } => {
                let y = &self.nodes[id].value;
                let dx: Vec<f64> = d_out.iter().zip(y.data()).map(|(d, y)| d * y).collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::Clamp { x, lo, hi } => {
                let tx = &self.nodes[*x].value;
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(tx.data())
                    .map(|(d, &v)| if v >= *lo && v <= *hi { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::Reshape { x } => {
                self.accumulate(grads, *x, d_out);
            }

            Op::Sum { x } => {
                let n = self.nodes[*x].value.len();
                let dx = vec![d_out[0]; n];
                self.accumulate(grads, *x, &dx);
            }
        }
    }
}

// ── Finite-difference checking ───────────────────────────────────────

/// A differentiable scalar objective built over bound parameter leaves.
pub trait LossFn {
    fn build(&self, g: &mut Graph, params: &BoundParams) -> Result<NodeId>;
}

impl<F> LossFn for F
where
    F: Fn(&mut Graph, &BoundParams) -> Result<NodeId>,
{
    fn build(&self, g: &mut Graph, params: &BoundParams) -> Result<NodeId> {
        self(g, params)
    }
}

fn eval_loss(store: &ParamStore, loss: &dyn LossFn) -> Result<f64> {
    let mut g = Graph::new();
    let bound = g.bind(store);
    let l = loss.build(&mut g, &bound)?;
    Ok(g.value(l).item())
}

/// Compare analytic gradients of `loss` w.r.t. parameter `param` against
/// central finite differences with step `epsilon`, over at most `max_coords`
/// coordinates (all of them when the tensor is small enough; otherwise an
/// evenly strided sample). Returns the max of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check(
    store: &mut ParamStore,
    param: &str,
    epsilon: f64,
    max_coords: usize,
    loss: &dyn LossFn,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::Domain("epsilon must be positive".into()));
    }
    let pos = store.position(param)?;
    let analytic = {
        let mut g = Graph::new();
        let bound = g.bind(store);
        let l = loss.build(&mut g, &bound)?;
        let mut grads = g.backward(l)?;
        grads
            .take(bound.ids[pos])
            .unwrap_or_else(|| Tensor::zeros(store.at(pos).shape().to_vec()))
    };

    let n = analytic.len();
    let stride = if max_coords >= n {
        1
    } else {
        n.div_ceil(max_coords.max(1))
    };
    let mut max_rel: f64 = 0.0;
    let mut coord = 0;
    while coord < n {
        let orig = store.at(pos).data()[coord];
        store.at_mut(pos).data_mut()[coord] = orig + epsilon;
        let f_plus = eval_loss(store, loss)?;
        store.at_mut(pos).data_mut()[coord] = orig - epsilon;
        let f_minus = eval_loss(store, loss)?;
        store.at_mut(pos).data_mut()[coord] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * epsilon);
        let a = analytic.data()[coord];
        let rel = (a - numeric).abs() / f64::max(1.0, a.abs());
        max_rel = max_rel.max(rel);
        coord += stride.max(1);
    }
    Ok(max_rel)
}
