//! The taped computation graph: forward op dispatch and reverse-mode backward.
//!
//! A [`Graph`] is built per forward pass and dropped after `backward`; there
//! are no persistent graphs. Nodes are appended in topological order by
//! construction (every input id precedes its consumer), so backward is a
//! single reverse sweep over the op records.

use std::sync::Arc;

use crate::error::{Result, VifError};
use crate::tensor::Tensor;

const MODULE: &str = "tensor";

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Operation kinds recorded on the tape.
///
/// Elementwise binary ops broadcast the right operand when its shape is a
/// suffix of the left operand's shape (leading-dimension batch broadcast);
/// anything else requires an explicit reshape.
#[derive(Debug, Clone)]
pub enum OpKind {
    /// `[m,k] @ [k,n] -> [m,n]`
    MatMul,
    /// `[m,n] -> [n,m]`
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    Exp,
    Log,
    Negate,
    Sigmoid,
    Softplus,
    Gelu,
    Clamp { lo: f64, hi: f64 },
    /// Sum of all entries -> scalar.
    Sum,
    /// Mean of all entries -> scalar.
    Mean,
    /// Max over all entries -> scalar (first-argmax backward).
    MaxReduce,
    /// `[n, d...] -> [d...]`, mean over the leading axis.
    MeanRows,
    SoftmaxLastDim,
    /// Softmax over the last dim restricted to `mask == true` positions;
    /// masked positions are exactly 0. The mask covers the trailing
    /// dimensions and is tiled over any leading ones.
    MaskedSoftmaxLastDim { mask: Arc<Vec<bool>> },
    /// Divide each last-dim row by its sum.
    RowNormalize,
    /// Inputs: (x, gamma, beta); normalization over the last dim.
    LayerNorm { eps: f64 },
    /// Concatenate along the leading axis.
    Concat,
    SliceRows { start: usize, end: usize },
    SliceCols { start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    /// Row gather: `out[i] = input[indices[i]]`. Embedding lookup is this op
    /// applied to the embedding table.
    Gather { indices: Arc<Vec<usize>> },
    /// `out[i] = input[i, indices[i]]` for a 2-D input.
    PickPerRow { indices: Arc<Vec<usize>> },
    /// Per-head attention scores without materializing head slices:
    /// inputs (q `[T,d]`, k `[S,d]`) -> `[H, T, S]` where
    /// `out[h] = scale * q_h @ k_h^T` on the h-th column block.
    HeadScores { n_heads: usize, scale: f64 },
    /// Per-head context merge: inputs (probs `[H,T,S]`, v `[S,d]`) ->
    /// `[T, d]` with `out[:, h-block] = probs[h] @ v_h`.
    HeadContext { n_heads: usize },
}

struct OpRecord {
    kind: OpKind,
    inputs: Vec<TensorId>,
}

struct Node {
    tensor: Tensor,
    op: Option<OpRecord>,
    /// Forward-pass byproduct some ops keep for backward (gelu stores its
    /// pointwise derivative so the tanh is not recomputed).
    aux: Option<Vec<f64>>,
}

/// Taped computation graph. Acyclic by construction: an op's inputs must
/// already exist, so every input id precedes its consumer.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op: None, aux: None });
        id
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, data: &[f64], shape: &[usize]) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(data.to_vec(), shape.to_vec())?.with_grad()))
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, data: &[f64], shape: &[usize]) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(data.to_vec(), shape.to_vec())?))
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.leaf(Tensor::scalar(v))
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let t = self.tensor(id);
        if t.numel() != 1 {
            return Err(VifError::contract(MODULE, "scalar_value on non-scalar tensor"));
        }
        Ok(t.data[0])
    }

    // ── Op helpers (thin wrappers over forward_op) ───────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Transpose, &[a])
    }
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Div, &[a, b])
    }
    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.forward_op(OpKind::AddScalar(c), &[a])
    }
    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.forward_op(OpKind::MulScalar(c), &[a])
    }
    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Log, &[a])
    }
    pub fn negate(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Negate, &[a])
    }
    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Sigmoid, &[a])
    }
    pub fn softplus(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Softplus, &[a])
    }
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Gelu, &[a])
    }
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        self.forward_op(OpKind::Clamp { lo, hi }, &[a])
    }
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::Mean, &[a])
    }
    pub fn max_reduce(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::MaxReduce, &[a])
    }
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::MeanRows, &[a])
    }
    pub fn softmax_lastdim(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::SoftmaxLastDim, &[a])
    }
    pub fn masked_softmax_lastdim(
        &mut self,
        a: TensorId,
        mask: Arc<Vec<bool>>,
    ) -> Result<TensorId> {
        self.forward_op(OpKind::MaskedSoftmaxLastDim { mask }, &[a])
    }
    pub fn row_normalize(&mut self, a: TensorId) -> Result<TensorId> {
        self.forward_op(OpKind::RowNormalize, &[a])
    }
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        self.forward_op(OpKind::LayerNorm { eps }, &[x, gamma, beta])
    }
    pub fn concat0(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        self.forward_op(OpKind::Concat, parts)
    }
    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        self.forward_op(OpKind::SliceRows { start, end }, &[a])
    }
    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        self.forward_op(OpKind::SliceCols { start, end }, &[a])
    }
    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        self.forward_op(OpKind::Reshape { shape: shape.to_vec() }, &[a])
    }
    /// Embedding lookup: gather rows of `table` by token id.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        self.forward_op(OpKind::Gather { indices: Arc::new(ids.to_vec()) }, &[table])
    }
    pub fn gather_rows(&mut self, a: TensorId, ids: &[usize]) -> Result<TensorId> {
        self.forward_op(OpKind::Gather { indices: Arc::new(ids.to_vec()) }, &[a])
    }
    pub fn pick_per_row(&mut self, a: TensorId, ids: &[usize]) -> Result<TensorId> {
        self.forward_op(OpKind::PickPerRow { indices: Arc::new(ids.to_vec()) }, &[a])
    }
    pub fn head_scores(
        &mut self,
        q: TensorId,
        k: TensorId,
        n_heads: usize,
        scale: f64,
    ) -> Result<TensorId> {
        self.forward_op(OpKind::HeadScores { n_heads, scale }, &[q, k])
    }
    pub fn head_context(&mut self, probs: TensorId, v: TensorId, n_heads: usize) -> Result<TensorId> {
        self.forward_op(OpKind::HeadContext { n_heads }, &[probs, v])
    }

    // ── Forward dispatch ─────────────────────────────────────────────

    /// Validate shapes, compute the output value, and record the op.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[TensorId]) -> Result<TensorId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(VifError::contract(MODULE, "op input id out of range"));
            }
        }
        let (data, shape, aux) = match &kind {
            // gelu keeps its derivative from the forward tanh evaluation
            OpKind::Gelu => {
                if inputs.len() != 1 {
                    return Err(VifError::contract(MODULE, "gelu expects 1 input"));
                }
                let a = self.tensor(inputs[0]);
                let mut out = Vec::with_capacity(a.data.len());
                let mut deriv = Vec::with_capacity(a.data.len());
                for &x in &a.data {
                    let (y, d) = gelu_with_deriv(x);
                    out.push(y);
                    deriv.push(d);
                }
                (out, a.shape.clone(), Some(deriv))
            }
            _ => {
                let (d, s) = self.compute(&kind, inputs)?;
                (d, s, None)
            }
        };
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].tensor.requires_grad);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor: Tensor { shape, data, requires_grad, grad: None },
            op: Some(OpRecord { kind, inputs: inputs.to_vec() }),
            aux,
        });
        Ok(id)
    }

    fn compute(&self, kind: &OpKind, inputs: &[TensorId]) -> Result<(Vec<f64>, Vec<usize>)> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(VifError::contract(
                    MODULE,
                    format!("{kind:?} expects {n} inputs, got {}", inputs.len()),
                ));
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                let (a, b) = (self.tensor(inputs[0]), self.tensor(inputs[1]));
                let (m, k, k2, n) = match (a.shape.as_slice(), b.shape.as_slice()) {
                    (&[m, k], &[k2, n]) => (m, k, k2, n),
                    _ => {
                        return Err(VifError::shape(
                            MODULE,
                            format!("matmul needs 2-D operands, got {:?} x {:?}", a.shape, b.shape),
                        ))
                    }
                };
                if k != k2 {
                    return Err(VifError::shape(
                        MODULE,
                        format!("matmul inner dims differ: {:?} x {:?}", a.shape, b.shape),
                    ));
                }
                let mut out = vec![0.0; m * n];
                dgemm_nn(m, k, n, &a.data, &b.data, &mut out, 0.0);
                Ok((out, vec![m, n]))
            }
            OpKind::Transpose => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                let (m, n) = dims2(a, "transpose")?;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = a.data[i * n + j];
                    }
                }
                Ok((out, vec![n, m]))
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                arity(2)?;
                let (a, b) = (self.tensor(inputs[0]), self.tensor(inputs[1]));
                let reps = broadcast_reps(&a.shape, &b.shape)?;
                let bn = b.data.len();
                if matches!(kind, OpKind::Div) && b.data.iter().any(|v| *v == 0.0) {
                    return Err(VifError::domain(MODULE, "division by zero"));
                }
                let mut out = vec![0.0; a.data.len()];
                for r in 0..reps {
                    let base = r * bn;
                    let av = &a.data[base..base + bn];
                    let ov = &mut out[base..base + bn];
                    match kind {
                        OpKind::Add => {
                            for i in 0..bn {
                                ov[i] = av[i] + b.data[i];
                            }
                        }
                        OpKind::Sub => {
                            for i in 0..bn {
                                ov[i] = av[i] - b.data[i];
                            }
                        }
                        OpKind::Mul => {
                            for i in 0..bn {
                                ov[i] = av[i] * b.data[i];
                            }
                        }
                        OpKind::Div => {
                            for i in 0..bn {
                                ov[i] = av[i] / b.data[i];
                            }
                        }
                        _ => unreachable!(),
                    }
                }
                Ok((out, a.shape.clone()))
            }
            OpKind::AddScalar(c) => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                Ok((a.data.iter().map(|v| v + c).collect(), a.shape.clone()))
            }
            OpKind::MulScalar(c) => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                Ok((a.data.iter().map(|v| v * c).collect(), a.shape.clone()))
            }
            OpKind::Exp => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                Ok((a.data.iter().map(|v| v.exp()).collect(), a.shape.clone()))
            }
            OpKind::Log => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                if a.data.iter().any(|v| *v <= 0.0) {
                    return Err(VifError::domain(MODULE, "log of nonpositive value"));
                }
                Ok((a.data.iter().map(|v| v.ln()).collect(), a.shape.clone()))
            }
            OpKind::Negate => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                Ok((a.data.iter().map(|v| -v).collect(), a.shape.clone()))
            }
            OpKind::Sigmoid => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                Ok((a.data.iter().map(|v| sigmoid(*v)).collect(), a.shape.clone()))
            }
            OpKind::Softplus => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                Ok((a.data.iter().map(|v| softplus(*v)).collect(), a.shape.clone()))
            }
            OpKind::Gelu => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                Ok((a.data.iter().map(|v| gelu(*v)).collect(), a.shape.clone()))
            }
            OpKind::Clamp { lo, hi } => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                Ok((a.data.iter().map(|v| v.clamp(*lo, *hi)).collect(), a.shape.clone()))
            }
            OpKind::Sum => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                Ok((vec![a.data.iter().sum()], vec![]))
            }
            OpKind::Mean => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                if a.data.is_empty() {
                    return Err(VifError::contract(MODULE, "mean of empty tensor"));
                }
                Ok((vec![a.data.iter().sum::<f64>() / a.data.len() as f64], vec![]))
            }
            OpKind::MaxReduce => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                if a.data.is_empty() {
                    return Err(VifError::contract(MODULE, "max of empty tensor"));
                }
                Ok((vec![a.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)], vec![]))
            }
            OpKind::MeanRows => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                if a.shape.is_empty() || a.shape[0] == 0 {
                    return Err(VifError::contract(MODULE, "mean_rows needs a nonempty leading axis"));
                }
                let n = a.shape[0];
                let d: usize = a.shape[1..].iter().product();
                let mut out = vec![0.0; d];
                for r in 0..n {
                    for j in 0..d {
                        out[j] += a.data[r * d + j];
                    }
                }
                for v in &mut out {
                    *v /= n as f64;
                }
                Ok((out, a.shape[1..].to_vec()))
            }
            OpKind::SoftmaxLastDim => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                let d = lastdim(a, "softmax")?;
                let mut out = vec![0.0; a.data.len()];
                for (row, orow) in a.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                    softmax_row(row, orow);
                }
                Ok((out, a.shape.clone()))
            }
            OpKind::MaskedSoftmaxLastDim { mask } => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                let d = lastdim(a, "masked softmax")?;
                if a.data.len() % mask.len() != 0 || mask.len() % d != 0 {
                    return Err(VifError::shape(
                        MODULE,
                        format!(
                            "mask length {} incompatible with tensor shape {:?}",
                            mask.len(),
                            a.shape
                        ),
                    ));
                }
                let mut out = vec![0.0; a.data.len()];
                let mrows = mask.len() / d;
                for (ri, (row, orow)) in
                    a.data.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate()
                {
                    let mrow = &mask[(ri % mrows) * d..(ri % mrows) * d + d];
                    masked_softmax_row(row, mrow, orow)?;
                }
                Ok((out, a.shape.clone()))
            }
            OpKind::RowNormalize => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                let d = lastdim(a, "row_normalize")?;
                let mut out = vec![0.0; a.data.len()];
                for (row, orow) in a.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                    let s: f64 = row.iter().sum();
                    if s <= 0.0 {
                        return Err(VifError::contract(
                            MODULE,
                            "row_normalize on a row with nonpositive mass",
                        ));
                    }
                    for (o, v) in orow.iter_mut().zip(row.iter()) {
                        *o = v / s;
                    }
                }
                Ok((out, a.shape.clone()))
            }
            OpKind::LayerNorm { eps } => {
                arity(3)?;
                let (x, g, b) =
                    (self.tensor(inputs[0]), self.tensor(inputs[1]), self.tensor(inputs[2]));
                let d = lastdim(x, "layer_norm")?;
                if g.shape != [d] || b.shape != [d] {
                    return Err(VifError::shape(
                        MODULE,
                        format!("layer_norm gamma/beta must have shape [{d}]"),
                    ));
                }
                let mut out = vec![0.0; x.data.len()];
                for (row, orow) in x.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        orow[j] = (row[j] - mu) * inv * g.data[j] + b.data[j];
                    }
                }
                Ok((out, x.shape.clone()))
            }
            OpKind::Concat => {
                if inputs.is_empty() {
                    return Err(VifError::contract(MODULE, "concat of zero tensors"));
                }
                let trailing = self.tensor(inputs[0]).shape[1..].to_vec();
                let mut rows = 0;
                let mut data = Vec::new();
                for id in inputs {
                    let t = self.tensor(*id);
                    if t.shape.is_empty() || t.shape[1..] != trailing[..] {
                        return Err(VifError::shape(
                            MODULE,
                            "concat operands must share trailing dimensions",
                        ));
                    }
                    rows += t.shape[0];
                    data.extend_from_slice(&t.data);
                }
                let mut shape = vec![rows];
                shape.extend_from_slice(&trailing);
                Ok((data, shape))
            }
            OpKind::SliceRows { start, end } => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                if a.shape.is_empty() || *start > *end || *end > a.shape[0] {
                    return Err(VifError::shape(
                        MODULE,
                        format!("row slice {start}..{end} out of range for shape {:?}", a.shape),
                    ));
                }
                let d: usize = a.shape[1..].iter().product();
                let data = a.data[start * d..end * d].to_vec();
                let mut shape = vec![end - start];
                shape.extend_from_slice(&a.shape[1..]);
                Ok((data, shape))
            }
            OpKind::SliceCols { start, end } => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                let (m, n) = dims2(a, "slice_cols")?;
                if *start > *end || *end > n {
                    return Err(VifError::shape(
                        MODULE,
                        format!("col slice {start}..{end} out of range for shape {:?}", a.shape),
                    ));
                }
                let w = end - start;
                let mut data = vec![0.0; m * w];
                for i in 0..m {
                    data[i * w..(i + 1) * w]
                        .copy_from_slice(&a.data[i * n + start..i * n + end]);
                }
                Ok((data, vec![m, w]))
            }
            OpKind::Reshape { shape } => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                let expect: usize = shape.iter().product();
                if expect != a.data.len() {
                    return Err(VifError::shape(
                        MODULE,
                        format!("reshape {:?} -> {:?} changes element count", a.shape, shape),
                    ));
                }
                Ok((a.data.clone(), shape.clone()))
            }
            OpKind::Gather { indices } => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                if a.shape.is_empty() {
                    return Err(VifError::shape(MODULE, "gather needs a leading axis"));
                }
                let rows = a.shape[0];
                let d: usize = a.shape[1..].iter().product();
                let mut data = Vec::with_capacity(indices.len() * d);
                for &ix in indices.iter() {
                    if ix >= rows {
                        return Err(VifError::shape(
                            MODULE,
                            format!("gather index {ix} out of range for {rows} rows"),
                        ));
                    }
                    data.extend_from_slice(&a.data[ix * d..(ix + 1) * d]);
                }
                let mut shape = vec![indices.len()];
                shape.extend_from_slice(&a.shape[1..]);
                Ok((data, shape))
            }
            OpKind::PickPerRow { indices } => {
                arity(1)?;
                let a = self.tensor(inputs[0]);
                let (m, n) = dims2(a, "pick_per_row")?;
                if indices.len() != m {
                    return Err(VifError::shape(
                        MODULE,
                        format!("pick_per_row needs {m} indices, got {}", indices.len()),
                    ));
                }
                let mut data = Vec::with_capacity(m);
                for (i, &ix) in indices.iter().enumerate() {
                    if ix >= n {
                        return Err(VifError::shape(
                            MODULE,
                            format!("pick index {ix} out of range for {n} columns"),
                        ));
                    }
                    data.push(a.data[i * n + ix]);
                }
                Ok((data, vec![m]))
            }
            OpKind::HeadScores { n_heads, scale } => {
                arity(2)?;
                let (q, k) = (self.tensor(inputs[0]), self.tensor(inputs[1]));
                let (t, d) = dims2(q, "head_scores q")?;
                let (s, d2) = dims2(k, "head_scores k")?;
                if d != d2 || *n_heads == 0 || d % n_heads != 0 {
                    return Err(VifError::shape(
                        MODULE,
                        format!("head_scores: widths {d}/{d2} vs {n_heads} heads"),
                    ));
                }
                let dh = d / n_heads;
                let mut out = vec![0.0; n_heads * t * s];
                for h in 0..*n_heads {
                    unsafe {
                        // out[h] = scale * q_h @ k_h^T, both column blocks
                        matrixmultiply::dgemm(
                            t, dh, s, *scale,
                            q.data.as_ptr().add(h * dh), d as isize, 1,
                            k.data.as_ptr().add(h * dh), 1, d as isize,
                            0.0,
                            out.as_mut_ptr().add(h * t * s), s as isize, 1,
                        );
                    }
                }
                Ok((out, vec![*n_heads, t, s]))
            }
            OpKind::HeadContext { n_heads } => {
                arity(2)?;
                let (p, v) = (self.tensor(inputs[0]), self.tensor(inputs[1]));
                let (h_dim, t, s) = match p.shape.as_slice() {
                    &[h, t, s] => (h, t, s),
                    _ => {
                        return Err(VifError::shape(
                            MODULE,
                            "head_context needs probs of shape [H, T, S]",
                        ))
                    }
                };
                let (s2, d) = dims2(v, "head_context v")?;
                if h_dim != *n_heads || s != s2 || d % n_heads != 0 {
                    return Err(VifError::shape(
                        MODULE,
                        format!("head_context shapes {:?} vs {:?}", p.shape, v.shape),
                    ));
                }
                let dh = d / n_heads;
                let mut out = vec![0.0; t * d];
                for h in 0..*n_heads {
                    unsafe {
                        // out[:, h-block] = probs[h] @ v_h
                        matrixmultiply::dgemm(
                            t, s, dh, 1.0,
                            p.data.as_ptr().add(h * t * s), s as isize, 1,
                            v.data.as_ptr().add(h * dh), d as isize, 1,
                            0.0,
                            out.as_mut_ptr().add(h * dh), d as isize, 1,
                        );
                    }
                }
                Ok((out, vec![t, d]))
            }
        }
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate additively
    /// across fan-out and are stored on every `requires_grad` node reached.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(VifError::contract(MODULE, "backward root id out of range"));
        }
        if !self.nodes[root.0].tensor.is_scalar() {
            return Err(VifError::contract(MODULE, "backward root must be a scalar"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            if !self.nodes[id].tensor.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            if let Some(rec) = &self.nodes[id].op {
                let kind = rec.kind.clone();
                let inputs = rec.inputs.clone();
                self.backward_op(&kind, &inputs, id, &gout, &mut grads)?;
            }
            // Keep the gradient on the node for inspection.
            grads[id] = Some(gout);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if self.nodes[i].tensor.requires_grad {
                if let Some(g) = g {
                    self.nodes[i].tensor.grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn backward_op(
        &self,
        kind: &OpKind,
        inputs: &[TensorId],
        out_id: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let needs = |g: &mut [Option<Vec<f64>>], id: TensorId, numel: usize| -> bool {
            if !self.nodes[id.0].tensor.requires_grad {
                return false;
            }
            if g[id.0].is_none() {
                g[id.0] = Some(vec![0.0; numel]);
            }
            true
        };
        match kind {
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if needs(grads, a, m * k) {
                    // dA += dC @ B^T
                    let bd = &self.nodes[b.0].tensor.data;
                    dgemm_abt(m, n, k, gout, bd, grads[a.0].as_mut().unwrap());
                }
                if needs(grads, b, k * n) {
                    // dB += A^T @ dC
                    let ad = &self.nodes[a.0].tensor.data;
                    dgemm_atb(k, m, n, ad, gout, grads[b.0].as_mut().unwrap());
                }
            }
            OpKind::Transpose => {
                let a = inputs[0];
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                if needs(grads, a, m * n) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gout[j * m + i];
                        }
                    }
                }
            }
            OpKind::Add | OpKind::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                let an = self.nodes[a.0].tensor.numel();
                let bn = self.nodes[b.0].tensor.numel();
                if needs(grads, a, an) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..an {
                        ga[i] += gout[i];
                    }
                }
                if needs(grads, b, bn) {
                    let sign = if matches!(kind, OpKind::Sub) { -1.0 } else { 1.0 };
                    let gb = grads[b.0].as_mut().unwrap();
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % bn] += sign * g;
                    }
                }
            }
            OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let an = self.nodes[a.0].tensor.numel();
                let bn = self.nodes[b.0].tensor.numel();
                if needs(grads, a, an) {
                    let bd = &self.nodes[b.0].tensor.data;
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..an {
                        ga[i] += gout[i] * bd[i % bn];
                    }
                }
                if needs(grads, b, bn) {
                    let ad = &self.nodes[a.0].tensor.data;
                    let gb = grads[b.0].as_mut().unwrap();
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % bn] += g * ad[i];
                    }
                }
            }
            OpKind::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let an = self.nodes[a.0].tensor.numel();
                let bn = self.nodes[b.0].tensor.numel();
                let bd = &self.nodes[b.0].tensor.data;
                if needs(grads, a, an) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..an {
                        ga[i] += gout[i] / bd[i % bn];
                    }
                }
                if needs(grads, b, bn) {
                    let ad = &self.nodes[a.0].tensor.data;
                    let gb = grads[b.0].as_mut().unwrap();
                    for (i, g) in gout.iter().enumerate() {
                        let bv = bd[i % bn];
                        gb[i % bn] -= g * ad[i] / (bv * bv);
                    }
                }
            }
            OpKind::AddScalar(_) => {
                unary_accum(self, grads, inputs[0], gout, |_, g| g);
            }
            OpKind::MulScalar(c) => {
                let c = *c;
                unary_accum(self, grads, inputs[0], gout, move |_, g| c * g);
            }
            OpKind::Exp => {
                let od = &self.nodes[out_id].tensor.data;
                let a = inputs[0];
                if needs(grads, a, od.len()) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..od.len() {
                        ga[i] += gout[i] * od[i];
                    }
                }
            }
            OpKind::Log => {
                let ad = &self.nodes[inputs[0].0].tensor.data;
                let a = inputs[0];
                if needs(grads, a, ad.len()) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..ad.len() {
                        ga[i] += gout[i] / ad[i];
                    }
                }
            }
            OpKind::Negate => {
                unary_accum(self, grads, inputs[0], gout, |_, g| -g);
            }
            OpKind::Sigmoid => {
                let od = &self.nodes[out_id].tensor.data;
                let a = inputs[0];
                if needs(grads, a, od.len()) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..od.len() {
                        ga[i] += gout[i] * od[i] * (1.0 - od[i]);
                    }
                }
            }
            OpKind::Softplus => {
                let a = inputs[0];
                let ad = &self.nodes[a.0].tensor.data;
                if needs(grads, a, ad.len()) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..ad.len() {
                        ga[i] += gout[i] * sigmoid(ad[i]);
                    }
                }
            }
            OpKind::Gelu => {
                let a = inputs[0];
                let ad = &self.nodes[a.0].tensor.data;
                if needs(grads, a, ad.len()) {
                    let aux = self.nodes[out_id].aux.as_deref();
                    let ga = grads[a.0].as_mut().unwrap();
                    match aux {
                        Some(d) => {
                            for i in 0..ad.len() {
                                ga[i] += gout[i] * d[i];
                            }
                        }
                        None => {
                            for i in 0..ad.len() {
                                ga[i] += gout[i] * gelu_with_deriv(ad[i]).1;
                            }
                        }
                    }
                }
            }
            OpKind::Clamp { lo, hi } => {
                let a = inputs[0];
                let ad = &self.nodes[a.0].tensor.data;
                if needs(grads, a, ad.len()) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..ad.len() {
                        if ad[i] >= *lo && ad[i] <= *hi {
                            ga[i] += gout[i];
                        }
                    }
                }
            }
            OpKind::Sum => {
                let a = inputs[0];
                let an = self.nodes[a.0].tensor.numel();
                if needs(grads, a, an) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for g in ga.iter_mut() {
                        *g += gout[0];
                    }
                }
            }
            OpKind::Mean => {
                let a = inputs[0];
                let an = self.nodes[a.0].tensor.numel();
                if needs(grads, a, an) {
                    let ga = grads[a.0].as_mut().unwrap();
                    let g = gout[0] / an as f64;
                    for gv in ga.iter_mut() {
                        *gv += g;
                    }
                }
            }
            OpKind::MaxReduce => {
                let a = inputs[0];
                let ad = &self.nodes[a.0].tensor.data;
                if needs(grads, a, ad.len()) {
                    let mut arg = 0;
                    for (i, v) in ad.iter().enumerate() {
                        if *v > ad[arg] {
                            arg = i;
                        }
                    }
                    grads[a.0].as_mut().unwrap()[arg] += gout[0];
                }
            }
            OpKind::MeanRows => {
                let a = inputs[0];
                let n = self.shape(a)[0];
                let d: usize = self.shape(a)[1..].iter().product();
                if needs(grads, a, n * d) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for r in 0..n {
                        for j in 0..d {
                            ga[r * d + j] += gout[j] / n as f64;
                        }
                    }
                }
            }
            OpKind::SoftmaxLastDim => {
                let a = inputs[0];
                let od = &self.nodes[out_id].tensor.data;
                let d = *self.shape(a).last().unwrap();
                if needs(grads, a, od.len()) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for r in 0..od.len() / d {
                        let y = &od[r * d..(r + 1) * d];
                        let go = &gout[r * d..(r + 1) * d];
                        let dot: f64 = go.iter().zip(y.iter()).map(|(g, y)| g * y).sum();
                        let gr = &mut ga[r * d..(r + 1) * d];
                        for j in 0..d {
                            gr[j] += y[j] * (go[j] - dot);
                        }
                    }
                }
            }
            OpKind::MaskedSoftmaxLastDim { mask } => {
                let a = inputs[0];
                let od = &self.nodes[out_id].tensor.data;
                let d = *self.shape(a).last().unwrap();
                let mrows = mask.len() / d;
                if needs(grads, a, od.len()) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for r in 0..od.len() / d {
                        let y = &od[r * d..(r + 1) * d];
                        let go = &gout[r * d..(r + 1) * d];
                        let mrow = &mask[(r % mrows) * d..(r % mrows) * d + d];
                        let dot: f64 = (0..d).filter(|j| mrow[*j]).map(|j| go[j] * y[j]).sum();
                        let gr = &mut ga[r * d..(r + 1) * d];
                        for j in 0..d {
                            if mrow[j] {
                                gr[j] += y[j] * (go[j] - dot);
                            }
                        }
                    }
                }
            }
            OpKind::RowNormalize => {
                let a = inputs[0];
                let ad = &self.nodes[a.0].tensor.data;
                let od = &self.nodes[out_id].tensor.data;
                let d = *self.shape(a).last().unwrap();
                if needs(grads, a, ad.len()) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for r in 0..ad.len() / d {
                        let x = &ad[r * d..(r + 1) * d];
                        let y = &od[r * d..(r + 1) * d];
                        let go = &gout[r * d..(r + 1) * d];
                        let s: f64 = x.iter().sum();
                        let dot: f64 = go.iter().zip(y.iter()).map(|(g, y)| g * y).sum();
                        let gr = &mut ga[r * d..(r + 1) * d];
                        for j in 0..d {
                            gr[j] += (go[j] - dot) / s;
                        }
                    }
                }
            }
            OpKind::LayerNorm { eps } => {
                let (x, g, b) = (inputs[0], inputs[1], inputs[2]);
                let xd = &self.nodes[x.0].tensor.data;
                let gd = &self.nodes[g.0].tensor.data;
                let d = *self.shape(x).last().unwrap();
                let rows = xd.len() / d;
                let want_x = self.nodes[x.0].tensor.requires_grad;
                let want_g = self.nodes[g.0].tensor.requires_grad;
                let want_b = self.nodes[b.0].tensor.requires_grad;
                if want_x {
                    needs(grads, x, xd.len());
                }
                if want_g {
                    needs(grads, g, d);
                }
                if want_b {
                    needs(grads, b, d);
                }
                let mut xhat = vec![0.0; d];
                for r in 0..rows {
                    let xr = &xd[r * d..(r + 1) * d];
                    let go = &gout[r * d..(r + 1) * d];
                    let mu = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        xhat[j] = (xr[j] - mu) * inv;
                    }
                    if want_b {
                        let gb = grads[b.0].as_mut().unwrap();
                        for j in 0..d {
                            gb[j] += go[j];
                        }
                    }
                    if want_g {
                        let gg = grads[g.0].as_mut().unwrap();
                        for j in 0..d {
                            gg[j] += go[j] * xhat[j];
                        }
                    }
                    if want_x {
                        let mut mean_u = 0.0;
                        let mut mean_ux = 0.0;
                        for j in 0..d {
                            let u = go[j] * gd[j];
                            mean_u += u;
                            mean_ux += u * xhat[j];
                        }
                        mean_u /= d as f64;
                        mean_ux /= d as f64;
                        let gx = grads[x.0].as_mut().unwrap();
                        for j in 0..d {
                            let u = go[j] * gd[j];
                            gx[r * d + j] += (u - mean_u - xhat[j] * mean_ux) * inv;
                        }
                    }
                }
            }
            OpKind::Concat => {
                let mut offset = 0;
                for id in inputs {
                    let numel = self.nodes[id.0].tensor.numel();
                    if needs(grads, *id, numel) {
                        let ga = grads[id.0].as_mut().unwrap();
                        for i in 0..numel {
                            ga[i] += gout[offset + i];
                        }
                    }
                    offset += numel;
                }
            }
            OpKind::SliceRows { start, .. } => {
                let a = inputs[0];
                let d: usize = self.shape(a)[1..].iter().product();
                let an = self.nodes[a.0].tensor.numel();
                if needs(grads, a, an) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (i, g) in gout.iter().enumerate() {
                        ga[start * d + i] += g;
                    }
                }
            }
            OpKind::SliceCols { start, end } => {
                let a = inputs[0];
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let w = end - start;
                if needs(grads, a, m * n) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..m {
                        for j in 0..w {
                            ga[i * n + start + j] += gout[i * w + j];
                        }
                    }
                }
            }
            OpKind::Reshape { .. } => {
                unary_accum(self, grads, inputs[0], gout, |_, g| g);
            }
            OpKind::Gather { indices } => {
                let a = inputs[0];
                let d: usize = self.shape(a)[1..].iter().product();
                let an = self.nodes[a.0].tensor.numel();
                if needs(grads, a, an) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (i, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            ga[ix * d + j] += gout[i * d + j];
                        }
                    }
                }
            }
            OpKind::PickPerRow { indices } => {
                let a = inputs[0];
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                if needs(grads, a, m * n) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (i, &ix) in indices.iter().enumerate() {
                        ga[i * n + ix] += gout[i];
                    }
                }
            }
            OpKind::HeadScores { n_heads, scale } => {
                let (q, k) = (inputs[0], inputs[1]);
                let (t, d) = (self.shape(q)[0], self.shape(q)[1]);
                let s = self.shape(k)[0];
                let dh = d / n_heads;
                if needs(grads, q, t * d) {
                    let kd = &self.nodes[k.0].tensor.data;
                    let gq = grads[q.0].as_mut().unwrap();
                    for h in 0..*n_heads {
                        unsafe {
                            // dq_h += scale * dout[h] @ k_h
                            matrixmultiply::dgemm(
                                t, s, dh, *scale,
                                gout.as_ptr().add(h * t * s), s as isize, 1,
                                kd.as_ptr().add(h * dh), d as isize, 1,
                                1.0,
                                gq.as_mut_ptr().add(h * dh), d as isize, 1,
                            );
                        }
                    }
                }
                if needs(grads, k, s * d) {
                    let qd = &self.nodes[q.0].tensor.data;
                    let gk = grads[k.0].as_mut().unwrap();
                    for h in 0..*n_heads {
                        unsafe {
                            // dk_h += scale * dout[h]^T @ q_h
                            matrixmultiply::dgemm(
                                s, t, dh, *scale,
                                gout.as_ptr().add(h * t * s), 1, s as isize,
                                qd.as_ptr().add(h * dh), d as isize, 1,
                                1.0,
                                gk.as_mut_ptr().add(h * dh), d as isize, 1,
                            );
                        }
                    }
                }
            }
            OpKind::HeadContext { n_heads } => {
                let (p, v) = (inputs[0], inputs[1]);
                let (t, s) = (self.shape(p)[1], self.shape(p)[2]);
                let d = self.shape(v)[1];
                let dh = d / n_heads;
                if needs(grads, p, n_heads * t * s) {
                    let vd = &self.nodes[v.0].tensor.data;
                    let gp = grads[p.0].as_mut().unwrap();
                    for h in 0..*n_heads {
                        unsafe {
                            // dprobs[h] += dout[:, h-block] @ v_h^T
                            matrixmultiply::dgemm(
                                t, dh, s, 1.0,
                                gout.as_ptr().add(h * dh), d as isize, 1,
                                vd.as_ptr().add(h * dh), 1, d as isize,
                                1.0,
                                gp.as_mut_ptr().add(h * t * s), s as isize, 1,
                            );
                        }
                    }
                }
                if needs(grads, v, s * d) {
                    let pd = &self.nodes[p.0].tensor.data;
                    let gv = grads[v.0].as_mut().unwrap();
                    for h in 0..*n_heads {
                        unsafe {
                            // dv_h += probs[h]^T @ dout[:, h-block]
                            matrixmultiply::dgemm(
                                s, t, dh, 1.0,
                                pd.as_ptr().add(h * t * s), 1, s as isize,
                                gout.as_ptr().add(h * dh), d as isize, 1,
                                1.0,
                                gv.as_mut_ptr().add(h * dh), d as isize, 1,
                            );
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Accumulate `f(input_value, gout)` into the input gradient elementwise.
fn unary_accum(
    g: &Graph,
    grads: &mut [Option<Vec<f64>>],
    a: TensorId,
    gout: &[f64],
    f: impl Fn(f64, f64) -> f64,
) {
    if !g.nodes[a.0].tensor.requires_grad {
        return;
    }
    let ad = &g.nodes[a.0].tensor.data;
    if grads[a.0].is_none() {
        grads[a.0] = Some(vec![0.0; ad.len()]);
    }
    let ga = grads[a.0].as_mut().unwrap();
    for i in 0..gout.len().min(ad.len()) {
        ga[i] += f(ad[i], gout[i]);
    }
}

// ── Shape helpers ────────────────────────────────────────────────────

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[m, n] => Ok((m, n)),
        _ => Err(VifError::shape(MODULE, format!("{what} needs a 2-D tensor, got {:?}", t.shape))),
    }
}

fn lastdim(t: &Tensor, what: &str) -> Result<usize> {
    match t.shape.last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(VifError::shape(MODULE, format!("{what} needs a nonempty last dim"))),
    }
}

/// Right operand broadcasts when its shape is a suffix of the left one;
/// returns the number of leading repetitions.
fn broadcast_reps(a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != b[..] {
        return Err(VifError::shape(
            MODULE,
            format!("shapes {a:?} and {b:?} are not suffix-broadcastable"),
        ));
    }
    Ok(a[..a.len() - b.len()].iter().product())
}

// ── Scalar math ──────────────────────────────────────────────────────

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// (gelu(x), gelu'(x)) from one tanh evaluation.
fn gelu_with_deriv(x: f64) -> (f64, f64) {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let y = 0.5 * x * (1.0 + t);
    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, d)
}

/// Max-subtracted softmax of one row.
fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(row.iter()) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Masked variant: masked positions are exactly 0 in the output and an
/// all-masked row is a contract error, never NaN.
fn masked_softmax_row(row: &[f64], mask: &[bool], out: &mut [f64]) -> Result<()> {
    let mut m = f64::NEG_INFINITY;
    for (v, vis) in row.iter().zip(mask.iter()) {
        if *vis && *v > m {
            m = *v;
        }
    }
    if m == f64::NEG_INFINITY {
        return Err(VifError::contract(MODULE, "masked softmax over an all-masked row"));
    }
    let mut z = 0.0;
    for ((o, v), vis) in out.iter_mut().zip(row.iter()).zip(mask.iter()) {
        if *vis {
            *o = (v - m).exp();
            z += *o;
        } else {
            *o = 0.0;
        }
    }
    for (o, vis) in out.iter_mut().zip(mask.iter()) {
        if *vis {
            *o /= z;
        }
    }
    Ok(())
}

// ── GEMM wrappers (matrixmultiply does the heavy lifting) ───────────

/// C = A @ B with C overwritten (beta = 0) or accumulated (beta = 1).
pub(crate) fn dgemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C += A @ B^T where A is [m,n], B is [k,n], C is [m,k].
fn dgemm_abt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            1.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// C += A^T @ B where A is [m,k], B is [m,n], C is [k,n].
fn dgemm_atb(k: usize, m: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rng_tensor(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(data, shape.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut g = Graph::new();
        let eye = g.constant(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        for n in [1usize, 2, 5] {
            let x = rng_tensor(&mut rng, &[3, n], -2.0, 2.0);
            let xid = g.leaf(x.clone());
            let y = g.matmul(eye, xid).unwrap();
            assert_eq!(g.data(y), x.data.as_slice());
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(&[0.0; 4], &[1, 4]).unwrap();
        let y = g.softmax_lastdim(x).unwrap();
        for v in g.data(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn exp_log_inverse_pair() {
        let mut g = Graph::new();
        let x = g.constant(&[2.5], &[1]).unwrap();
        let y = g.log(x).unwrap();
        let z = g.exp(y).unwrap();
        assert!((g.data(z)[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(&[3.0, -1.0, 0.5, 2.0], &[4]).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_product_is_product_rule() {
        let mut g = Graph::new();
        let x = g.param(&[3.0], &[]).unwrap();
        let y = g.param(&[5.0], &[]).unwrap();
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert_eq!(g.grad(y).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(&[1.0, 2.0], &[2]).unwrap();
        assert!(matches!(g.backward(x), Err(VifError::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates_like_expanded_graph() {
        // root = x*y + x*y, built once with a shared node and once expanded.
        let xv = vec![1.3, -0.7];
        let yv = vec![0.4, 2.2];
        let shared = {
            let mut g = Graph::new();
            let x = g.param(&xv, &[2]).unwrap();
            let y = g.param(&yv, &[2]).unwrap();
            let p = g.mul(x, y).unwrap();
            let s = g.add(p, p).unwrap();
            let root = g.sum(s).unwrap();
            g.backward(root).unwrap();
            (g.grad(x).unwrap().to_vec(), g.grad(y).unwrap().to_vec())
        };
        let expanded = {
            let mut g = Graph::new();
            let x = g.param(&xv, &[2]).unwrap();
            let y = g.param(&yv, &[2]).unwrap();
            let p1 = g.mul(x, y).unwrap();
            let p2 = g.mul(x, y).unwrap();
            let s = g.add(p1, p2).unwrap();
            let root = g.sum(s).unwrap();
            g.backward(root).unwrap();
            (g.grad(x).unwrap().to_vec(), g.grad(y).unwrap().to_vec())
        };
        assert_eq!(shared, expanded);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(&[1.0, 0.0], &[2]).unwrap();
        assert!(matches!(g.log(x), Err(VifError::Domain(_))));
        let y = g.constant(&[-1.0], &[1]).unwrap();
        assert!(matches!(g.log(y), Err(VifError::Domain(_))));
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let mut g = Graph::new();
        let a = g.constant(&[1.0], &[1]).unwrap();
        let b = g.constant(&[0.0], &[1]).unwrap();
        assert!(matches!(g.div(a, b), Err(VifError::Domain(_))));
    }

    #[test]
    fn matmul_shape_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(&[1.0, 2.0], &[1, 2]).unwrap();
        let b = g.constant(&[1.0, 2.0, 3.0], &[3, 1]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(VifError::Shape(_))));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let mut g = Graph::new();
            let x = g.leaf(rng_tensor(&mut rng, &[5, 7], -30.0, 30.0));
            let y = g.softmax_lastdim(x).unwrap();
            for row in g.data(y).chunks_exact(7) {
                assert!(row.iter().all(|v| *v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_renormalizes_rest() {
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..200 {
            let d = 6;
            let mut mask: Vec<bool> = (0..d).map(|_| rng.random_bool(0.6)).collect();
            if mask.iter().all(|m| !m) {
                mask[0] = true;
            }
            let mut g = Graph::new();
            let x = g.leaf(rng_tensor(&mut rng, &[3, d], -5.0, 5.0));
            let y = g.masked_softmax_lastdim(x, Arc::new(mask.clone())).unwrap();
            for row in g.data(y).chunks_exact(d) {
                let mut s = 0.0;
                for (v, m) in row.iter().zip(mask.iter()) {
                    if *m {
                        assert!(*v >= 0.0);
                        s += v;
                    } else {
                        assert_eq!(*v, 0.0);
                    }
                }
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn masked_softmax_all_masked_row_is_contract_error() {
        let mut g = Graph::new();
        let x = g.constant(&[1.0, 2.0], &[1, 2]).unwrap();
        let r = g.masked_softmax_lastdim(x, Arc::new(vec![false, false]));
        assert!(matches!(r, Err(VifError::Contract(_))));
    }

    /// Every supported op kind against central finite differences, many
    /// random seeds each. This is the independent oracle for backward.
    #[test]
    fn all_ops_match_finite_differences() {
        let h = 1e-5;
        let tol = 1e-4;
        let mut worst: (f64, &str) = (0.0, "none");
        for seed in 0..100u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut check = |name: &'static str,
                             pts: Vec<Tensor>,
                             f: &dyn Fn(&mut Graph, &[TensorId]) -> crate::error::Result<TensorId>| {
                let err = grad_check(f, &pts, h)
                    .unwrap_or_else(|e| panic!("{name} (seed {seed}): {e}"));
                if err > worst.0 {
                    worst = (err, name);
                }
                assert!(err < tol, "{name} seed {seed}: rel err {err}");
            };

            let a = rng_tensor(&mut rng, &[3, 4], -2.0, 2.0);
            let b = rng_tensor(&mut rng, &[4, 2], -2.0, 2.0);
            check("matmul", vec![a, b], &|g, ids| {
                let m = g.matmul(ids[0], ids[1])?;
                g.sum(m)
            });

            let a = rng_tensor(&mut rng, &[2, 3], -2.0, 2.0);
            check("transpose", vec![a], &|g, ids| {
                let t = g.transpose(ids[0])?;
                let sq = g.mul(t, t)?;
                g.sum(sq)
            });

            type BinOp = fn(&mut Graph, TensorId, TensorId) -> crate::error::Result<TensorId>;
            let binaries: [(&'static str, BinOp); 3] =
                [("add", Graph::add), ("sub", Graph::sub), ("mul", Graph::mul)];
            for (name, op) in binaries {
                let a = rng_tensor(&mut rng, &[2, 3], -2.0, 2.0);
                let b = rng_tensor(&mut rng, &[3], -2.0, 2.0); // suffix broadcast
                check(name, vec![a, b], &move |g, ids| {
                    let y = op(g, ids[0], ids[1])?;
                    let sq = g.mul(y, y)?;
                    g.sum(sq)
                });
            }

            let a = rng_tensor(&mut rng, &[2, 3], -2.0, 2.0);
            let b = rng_tensor(&mut rng, &[3], 0.5, 2.0); // away from zero
            check("div", vec![a, b], &|g, ids| {
                let y = g.div(ids[0], ids[1])?;
                g.sum(y)
            });

            let unaries: Vec<(&'static str, fn(&mut Graph, TensorId) -> crate::error::Result<TensorId>, f64, f64)> = vec![
                ("exp", Graph::exp, -2.0, 2.0),
                ("log", Graph::log, 0.1, 3.0),
                ("negate", Graph::negate, -2.0, 2.0),
                ("sigmoid", Graph::sigmoid, -4.0, 4.0),
                ("softplus", Graph::softplus, -4.0, 4.0),
                ("gelu", Graph::gelu, -3.0, 3.0),
            ];
            for (name, op, lo, hi) in unaries {
                let a = rng_tensor(&mut rng, &[5], lo, hi);
                check(name, vec![a], &move |g, ids| {
                    let y = op(g, ids[0])?;
                    let sq = g.mul(y, y)?;
                    g.sum(sq)
                });
            }

            // clamp: keep samples away from the kink at the boundaries
            let a = rng_tensor(&mut rng, &[6], -3.0, 3.0);
            check("clamp", vec![a], &|g, ids| {
                let y = g.clamp(ids[0], -1.5001234, 1.5001234)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            });

            let a = rng_tensor(&mut rng, &[2, 3], -2.0, 2.0);
            check("sum", vec![a.clone()], &|g, ids| g.sum(ids[0]));
            check("mean", vec![a.clone()], &|g, ids| g.mean(ids[0]));
            check("max_reduce", vec![a.clone()], &|g, ids| g.max_reduce(ids[0]));
            check("mean_rows", vec![a.clone()], &|g, ids| {
                let m = g.mean_rows(ids[0])?;
                let sq = g.mul(m, m)?;
                g.sum(sq)
            });

            let a = rng_tensor(&mut rng, &[3, 5], -3.0, 3.0);
            let w = rng_tensor(&mut rng, &[3, 5], -1.0, 1.0);
            let wd = w.data.clone();
            check("softmax_lastdim", vec![a.clone()], &move |g, ids| {
                let y = g.softmax_lastdim(ids[0])?;
                let wid = g.constant(&wd, &[3, 5])?;
                let p = g.mul(y, wid)?;
                g.sum(p)
            });

            let mut mask: Vec<bool> = (0..5).map(|_| rng.random_bool(0.7)).collect();
            mask[1] = true;
            let wd = w.data.clone();
            let m2 = mask.clone();
            check("masked_softmax_lastdim", vec![a.clone()], &move |g, ids| {
                let y = g.masked_softmax_lastdim(ids[0], Arc::new(m2.clone()))?;
                let wid = g.constant(&wd, &[3, 5])?;
                let p = g.mul(y, wid)?;
                g.sum(p)
            });

            let pos = rng_tensor(&mut rng, &[3, 4], 0.2, 2.0);
            let wd2: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            check("row_normalize", vec![pos], &move |g, ids| {
                let y = g.row_normalize(ids[0])?;
                let wid = g.constant(&wd2, &[3, 4])?;
                let p = g.mul(y, wid)?;
                g.sum(p)
            });

            let x = rng_tensor(&mut rng, &[3, 4], -2.0, 2.0);
            let gamma = rng_tensor(&mut rng, &[4], 0.5, 1.5);
            let beta = rng_tensor(&mut rng, &[4], -0.5, 0.5);
            check("layer_norm", vec![x, gamma, beta], &|g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            });

            let a = rng_tensor(&mut rng, &[2, 3], -2.0, 2.0);
            let b = rng_tensor(&mut rng, &[4, 3], -2.0, 2.0);
            check("concat", vec![a, b], &|g, ids| {
                let c = g.concat0(&[ids[0], ids[1]])?;
                let sq = g.mul(c, c)?;
                g.sum(sq)
            });

            let a = rng_tensor(&mut rng, &[5, 3], -2.0, 2.0);
            check("slice_rows", vec![a.clone()], &|g, ids| {
                let s = g.slice_rows(ids[0], 1, 4)?;
                let sq = g.mul(s, s)?;
                g.sum(sq)
            });
            check("slice_cols", vec![a.clone()], &|g, ids| {
                let s = g.slice_cols(ids[0], 0, 2)?;
                let sq = g.mul(s, s)?;
                g.sum(sq)
            });
            check("reshape", vec![a.clone()], &|g, ids| {
                let r = g.reshape(ids[0], &[3, 5])?;
                let sq = g.mul(r, r)?;
                g.sum(sq)
            });

            let table = rng_tensor(&mut rng, &[6, 3], -1.0, 1.0);
            check("gather", vec![table], &|g, ids| {
                let e = g.gather_rows(ids[0], &[0, 2, 2, 5])?;
                let sq = g.mul(e, e)?;
                g.sum(sq)
            });

            let m = rng_tensor(&mut rng, &[4, 5], -2.0, 2.0);
            check("pick_per_row", vec![m], &|g, ids| {
                let p = g.pick_per_row(ids[0], &[1, 0, 4, 2])?;
                let sq = g.mul(p, p)?;
                g.sum(sq)
            });

            let a = rng_tensor(&mut rng, &[4], -2.0, 2.0);
            check("add_scalar", vec![a.clone()], &|g, ids| {
                let y = g.add_scalar(ids[0], 0.7)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            });
            check("mul_scalar", vec![a], &|g, ids| {
                let y = g.mul_scalar(ids[0], -1.3)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            });

            // fused multi-head attention kernels
            let q = rng_tensor(&mut rng, &[3, 4], -1.0, 1.0);
            let k = rng_tensor(&mut rng, &[5, 4], -1.0, 1.0);
            check("head_scores", vec![q.clone(), k.clone()], &|g, ids| {
                let s = g.head_scores(ids[0], ids[1], 2, 0.7)?;
                let sq = g.mul(s, s)?;
                g.sum(sq)
            });
            let v = rng_tensor(&mut rng, &[5, 4], -1.0, 1.0);
            check("head_context", vec![q, k, v], &|g, ids| {
                let s = g.head_scores(ids[0], ids[1], 2, 0.5)?;
                let p = g.softmax_lastdim(s)?;
                let c = g.head_context(p, ids[2], 2)?;
                let sq = g.mul(c, c)?;
                g.sum(sq)
            });
        }
        // Loud record of the worst offender across the sweep.
        eprintln!("worst op gradcheck: {} at {:.3e}", worst.1, worst.0);
    }
}

