//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! records in reverse exactly once, accumulating adjoints. Graphs are cheap;
//! build a fresh one per forward pass.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::TensorError;
use crate::tensor::{gelu_grad, matmul_into, Tensor};

type TResult<T> = Result<T, TensorError>;

/// Probabilities below this are clamped before taking the log in
/// [`Var::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    Relu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedFill(usize, Vec<bool>),
    Concat(Vec<usize>),
    StackRows(Vec<usize>),
    SliceLast(usize, usize),
    SliceRows(usize, usize),
    MeanRows(usize),
    Sum(usize),
    Reshape(usize),
    Embedding(usize, Vec<usize>),
    CrossEntropy {
        probs: usize,
        labels: Vec<Option<usize>>,
        count: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<Option<usize>>,
        count: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Adjoints produced by [`Graph::backward`], indexed by the variables of the
/// graph that produced them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Every variable that
    /// requires a gradient has one, zero-filled when the loss does not
    /// depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Allows [`Graph::backward`] to be called again.
    pub fn reset(&self) {
        self.consumed.set(false);
    }

    /// Reverse pass from a scalar `loss`. Calling it twice without an
    /// intervening [`Graph::reset`] is a contract error.
    pub fn backward(&self, loss: Var<'_>) -> TResult<Gradients> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(TensorError::Contract("loss belongs to a different graph".into()));
        }
        if self.consumed.get() {
            return Err(TensorError::Contract(
                "backward already called on this graph; reset it first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> TResult<()> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let out = &*node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].requires_grad {
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let gi = &g.data()[i * n..(i + 1) * n];
                    for p in 0..k {
                        let bp = &bv.data()[p * n..(p + 1) * n];
                        da[i * k + p] = gi.iter().zip(bp).map(|(x, y)| x * y).sum();
                    }
                }
                accumulate(grads, nodes, *a, Tensor::new(vec![m, k], da)?);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · dC
                let at = av.transpose()?;
                let mut db = vec![0.0; k * n];
                matmul_into(at.data(), g.data(), &mut db, k, m, n);
                accumulate(grads, nodes, *b, Tensor::new(vec![k, n], db)?);
            }
        }
        Op::Transpose(x) => accumulate(grads, nodes, *x, g.transpose()?),
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(grads, nodes, *a, g.mul(val(*b))?);
            accumulate(grads, nodes, *b, g.mul(val(*a))?);
        }
        Op::Scale(x, f) => accumulate(grads, nodes, *x, g.scale(*f)),
        Op::AddBias(x, b) => {
            accumulate(grads, nodes, *x, g.clone());
            if nodes[*b].requires_grad {
                let c = g.last_dim();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, nodes, *b, Tensor::new(val(*b).shape().to_vec(), db)?);
            }
        }
        Op::Tanh(x) => {
            let d = out.map(|y| 1.0 - y * y);
            accumulate(grads, nodes, *x, g.mul(&d)?);
        }
        Op::Sigmoid(x) => {
            let d = out.map(|y| y * (1.0 - y));
            accumulate(grads, nodes, *x, g.mul(&d)?);
        }
        Op::Gelu(x) => {
            let d = val(*x).map(gelu_grad);
            accumulate(grads, nodes, *x, g.mul(&d)?);
        }
        Op::Relu(x) => {
            let d = val(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            accumulate(grads, nodes, *x, g.mul(&d)?);
        }
        Op::Softmax(x) => {
            let c = out.last_dim();
            let mut dx = Vec::with_capacity(out.len());
            for (y, dy) in out.data().chunks(c).zip(g.data().chunks(c)) {
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                dx.extend(y.iter().zip(dy).map(|(yi, dyi)| yi * (dyi - dot)));
            }
            accumulate(grads, nodes, *x, Tensor::new(out.shape().to_vec(), dx)?);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        } => {
            let c = out.last_dim();
            let gv = val(*gain).data();
            let mut dx = Vec::with_capacity(out.len());
            let mut dgain = vec![0.0; c];
            let mut dbias = vec![0.0; c];
            for (r, (dy, xhat)) in g.data().chunks(c).zip(normed.chunks(c)).enumerate() {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..c {
                    let dxhat = dy[j] * gv[j];
                    mean_d += dxhat;
                    mean_dx += dxhat * xhat[j];
                    dgain[j] += dy[j] * xhat[j];
                    dbias[j] += dy[j];
                }
                mean_d /= c as f64;
                mean_dx /= c as f64;
                for j in 0..c {
                    let dxhat = dy[j] * gv[j];
                    dx.push(inv_std[r] * (dxhat - mean_d - xhat[j] * mean_dx));
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(out.shape().to_vec(), dx)?);
            accumulate(grads, nodes, *gain, Tensor::new(val(*gain).shape().to_vec(), dgain)?);
            accumulate(grads, nodes, *bias, Tensor::new(val(*bias).shape().to_vec(), dbias)?);
        }
        Op::MaskedFill(x, mask) => {
            let data = g
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { 0.0 } else { v })
                .collect();
            accumulate(grads, nodes, *x, Tensor::new(g.shape().to_vec(), data)?);
        }
        Op::Concat(parts) => {
            let mut start = 0;
            for &p in parts {
                let w = val(p).last_dim();
                if nodes[p].requires_grad {
                    let piece = g.slice_lastdim(start, w)?.reshape(val(p).shape())?;
                    accumulate(grads, nodes, p, piece);
                }
                start += w;
            }
        }
        Op::StackRows(parts) => {
            let c = g.last_dim();
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if nodes[p].requires_grad {
                    let piece = Tensor::new(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    accumulate(grads, nodes, p, piece);
                }
                offset += n;
                debug_assert_eq!(n % c, 0);
            }
        }
        Op::SliceLast(x, start) => {
            let src = val(*x);
            let c = src.last_dim();
            let w = g.last_dim();
            let mut dx = vec![0.0; src.len()];
            for (dst, gs) in dx.chunks_mut(c).zip(g.data().chunks(w)) {
                dst[*start..start + w].copy_from_slice(gs);
            }
            accumulate(grads, nodes, *x, Tensor::new(src.shape().to_vec(), dx)?);
        }
        Op::SliceRows(x, start) => {
            let src = val(*x);
            let c = src.last_dim();
            let mut dx = vec![0.0; src.len()];
            dx[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(grads, nodes, *x, Tensor::new(src.shape().to_vec(), dx)?);
        }
        Op::MeanRows(x) => {
            let src = val(*x);
            let rows = src.outer_len();
            let scaled: Vec<f64> = g.data().iter().map(|v| v / rows as f64).collect();
            let dx = scaled.repeat(rows);
            accumulate(grads, nodes, *x, Tensor::new(src.shape().to_vec(), dx)?);
        }
        Op::Sum(x) => {
            let src = val(*x);
            accumulate(grads, nodes, *x, Tensor::full(src.shape(), g.data()[0]));
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, g.reshape(val(*x).shape())?),
        Op::Embedding(table, ids) => {
            if nodes[*table].requires_grad {
                let tv = val(*table);
                let e = tv.last_dim();
                let mut dt = vec![0.0; tv.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        dt[id * e + j] += g.data()[row * e + j];
                    }
                }
                accumulate(grads, nodes, *table, Tensor::new(tv.shape().to_vec(), dt)?);
            }
        }
        Op::CrossEntropy { probs, labels, count } => {
            let pv = val(*probs);
            let c = pv.last_dim();
            let scale = g.data()[0] / *count as f64;
            let mut dp = vec![0.0; pv.len()];
            for (i, label) in labels.iter().enumerate() {
                if let Some(y) = label {
                    let p = pv.data()[i * c + y];
                    if p >= PROB_FLOOR {
                        dp[i * c + y] = -scale / p;
                    }
                }
            }
            accumulate(grads, nodes, *probs, Tensor::new(pv.shape().to_vec(), dp)?);
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            count,
            probs,
        } => {
            let lv = val(*logits);
            let c = lv.last_dim();
            let scale = g.data()[0] / *count as f64;
            let mut dl = vec![0.0; lv.len()];
            for (i, label) in labels.iter().enumerate() {
                if let Some(y) = label {
                    for j in 0..c {
                        let target = if j == *y { 1.0 } else { 0.0 };
                        dl[i * c + j] = scale * (probs[i * c + j] - target);
                    }
                }
            }
            accumulate(grads, nodes, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
        }
    }
    Ok(())
}

fn check_labels(labels: &[Option<usize>], rows: usize, classes: usize) -> TResult<usize> {
    if labels.len() != rows {
        return Err(TensorError::Dimension {
            op: "cross_entropy",
            lhs: vec![rows, classes],
            rhs: vec![labels.len()],
        });
    }
    let mut count = 0;
    for &y in labels.iter().flatten() {
        if y >= classes {
            return Err(TensorError::Index { index: y, size: classes });
        }
        count += 1;
    }
    if count == 0 {
        return Err(TensorError::Contract("cross entropy over zero unmasked rows".into()));
    }
    Ok(count)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Snapshot of the value held by this variable.
    pub fn value(&self) -> Tensor {
        (*self.graph.value(self.id)).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value(self.id).shape().to_vec()
    }

    fn unary(self, op: Op, value: Tensor) -> Var<'g> {
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(value, op, rg)
    }

    fn binary(self, other: Var<'g>, op: Op, value: Tensor) -> Var<'g> {
        let rg = self.graph.requires(&[self.id, other.id]);
        self.graph.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'g>) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).matmul(&self.graph.value(other.id))?;
        Ok(self.binary(other, Op::MatMul(self.id, other.id), v))
    }

    pub fn transpose(self) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).transpose()?;
        Ok(self.unary(Op::Transpose(self.id), v))
    }

    pub fn add(self, other: Var<'g>) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).add(&self.graph.value(other.id))?;
        Ok(self.binary(other, Op::Add(self.id, other.id), v))
    }

    pub fn sub(self, other: Var<'g>) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).sub(&self.graph.value(other.id))?;
        Ok(self.binary(other, Op::Sub(self.id, other.id), v))
    }

    pub fn mul(self, other: Var<'g>) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).mul(&self.graph.value(other.id))?;
        Ok(self.binary(other, Op::Mul(self.id, other.id), v))
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let v = self.graph.value(self.id).scale(factor);
        self.unary(Op::Scale(self.id, factor), v)
    }

    pub fn add_bias(self, bias: Var<'g>) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).add_bias(&self.graph.value(bias.id))?;
        Ok(self.binary(bias, Op::AddBias(self.id, bias.id), v))
    }

    /// `self · weight + bias`.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> TResult<Var<'g>> {
        self.matmul(weight)?.add_bias(bias)
    }

    pub fn tanh(self) -> Var<'g> {
        let v = self.graph.value(self.id).tanh();
        self.unary(Op::Tanh(self.id), v)
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.graph.value(self.id).sigmoid();
        self.unary(Op::Sigmoid(self.id), v)
    }

    pub fn gelu(self) -> Var<'g> {
        let v = self.graph.value(self.id).gelu();
        self.unary(Op::Gelu(self.id), v)
    }

    pub fn relu(self) -> Var<'g> {
        let v = self.graph.value(self.id).relu();
        self.unary(Op::Relu(self.id), v)
    }

    pub fn softmax_lastdim(self) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).softmax_lastdim()?;
        Ok(self.unary(Op::Softmax(self.id), v))
    }

    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> TResult<Var<'g>> {
        let x = self.graph.value(self.id);
        let (v, normed, inv_std) =
            x.layer_norm_parts(&self.graph.value(gain.id), &self.graph.value(bias.id), eps)?;
        let rg = self.graph.requires(&[self.id, gain.id, bias.id]);
        Ok(self.graph.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    pub fn masked_fill(self, mask: &[bool]) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).masked_fill(mask)?;
        Ok(self.unary(Op::MaskedFill(self.id, mask.to_vec()), v))
    }

    pub fn concat_lastdim(parts: &[Var<'g>]) -> TResult<Var<'g>> {
        let graph = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero variables".into()))?
            .graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| graph.value(p.id)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| &**v).collect();
        let v = Tensor::concat_lastdim(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = graph.requires(&ids);
        Ok(graph.push(v, Op::Concat(ids), rg))
    }

    pub fn stack_rows(parts: &[Var<'g>]) -> TResult<Var<'g>> {
        let graph = parts
            .first()
            .ok_or_else(|| TensorError::Contract("stack of zero variables".into()))?
            .graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| graph.value(p.id)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| &**v).collect();
        let v = Tensor::stack_rows(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = graph.requires(&ids);
        Ok(graph.push(v, Op::StackRows(ids), rg))
    }

    pub fn slice_lastdim(self, start: usize, len: usize) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).slice_lastdim(start, len)?;
        Ok(self.unary(Op::SliceLast(self.id, start), v))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).slice_rows(start, len)?;
        Ok(self.unary(Op::SliceRows(self.id, start), v))
    }

    pub fn mean_rows(self) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).mean_rows()?;
        Ok(self.unary(Op::MeanRows(self.id), v))
    }

    pub fn sum(self) -> Var<'g> {
        let v = self.graph.value(self.id).sum();
        self.unary(Op::Sum(self.id), v)
    }

    pub fn reshape(self, shape: &[usize]) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    /// Row lookup into a `V×E` table; differentiable in the table only.
    pub fn embedding_lookup(self, ids: &[usize]) -> TResult<Var<'g>> {
        let v = self.graph.value(self.id).embedding_lookup(ids)?;
        Ok(self.unary(Op::Embedding(self.id, ids.to_vec()), v))
    }

    /// Categorical cross-entropy of probability rows against labels:
    /// `-(1/N) Σ log p[i, y_i]` over rows whose label is `Some`. Rows with
    /// `None` are excluded from both the sum and `N`. Probabilities are
    /// floored at [`PROB_FLOOR`].
    pub fn cross_entropy(self, labels: &[Option<usize>]) -> TResult<Var<'g>> {
        let probs = self.graph.value(self.id);
        let c = probs.last_dim();
        let count = check_labels(labels, probs.outer_len(), c)?;
        let mut total = 0.0;
        for (i, label) in labels.iter().enumerate() {
            if let Some(y) = label {
                let p = probs.data()[i * c + y];
                if p < PROB_FLOOR {
                    log::warn!("probability {p:e} at true label {y} (row {i}) clamped to {PROB_FLOOR:e}");
                }
                total -= p.max(PROB_FLOOR).ln();
            }
        }
        let v = Tensor::scalar(total / count as f64);
        v.ensure_finite("cross_entropy")?;
        Ok(self.unary(
            Op::CrossEntropy {
                probs: self.id,
                labels: labels.to_vec(),
                count,
            },
            v,
        ))
    }

    /// Same objective as `softmax_lastdim().cross_entropy(labels)`, evaluated
    /// from logits with log-sum-exp and without the probability floor.
    pub fn softmax_cross_entropy(self, labels: &[Option<usize>]) -> TResult<Var<'g>> {
        let logits = self.graph.value(self.id);
        let c = logits.last_dim();
        let count = check_labels(labels, logits.outer_len(), c)?;
        let probs = logits.softmax_lastdim()?.into_data();
        let mut total = 0.0;
        for (i, label) in labels.iter().enumerate() {
            if let Some(y) = label {
                let row = logits.row_slice(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[*y];
            }
        }
        let v = Tensor::scalar(total / count as f64);
        v.ensure_finite("softmax_cross_entropy")?;
        Ok(self.unary(
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                count,
                probs,
            },
            v,
        ))
    }
}
