//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value plus whatever it needs for the backward pass. Parameters are read
//! from a borrowed [`ParamStore`] and are never copied onto the tape.
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients for parameters into a [`ParamGrads`] and for leaves into the
//! returned [`NodeGrads`].

use rand::Rng;

use super::params::{ParamGrads, ParamStore};
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Param(usize),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    MatMul {
        a: NodeId,
        ta: bool,
        b: NodeId,
        tb: bool,
    },
    Add(NodeId, NodeId),
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Tensor<T>>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    WeightedSum(Vec<(NodeId, T)>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Embedding { .. } => "embedding",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::Attention { .. } => "attention",
            Op::Dropout { .. } => "dropout",
            Op::SelectRows { .. } => "select_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedSum(_) => "weighted_sum",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    // `None` for parameters, whose value lives in the store.
    value: Option<Tensor<T>>,
}

/// Gradients of the backward root with respect to every node on the tape.
pub struct NodeGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> NodeGrads<T> {
    /// Gradient for `id`, or `None` if the root does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(index)) => self.params.tensor(*index),
            (None, _) => unreachable!("only parameter nodes are stored without a value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Attention probabilities (one `L×L` matrix per head) cached by an
    /// attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[Tensor<T>]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Node reading parameter `index`. Repeated calls return the same node.
    pub fn param(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes[index] = Some(id);
        id
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<NodeId> {
        let index = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named `{name}`")))?;
        Ok(self.param(index))
    }

    /// Constant input. Its gradient is reported in [`NodeGrads`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&id| id >= t.rows()) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} out of range for table {}x{}", t.rows(), t.cols()),
            ));
        }
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            out,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `ta`/`tb` transpose the operand.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let out = Tensor::matmul(self.value(a), ta, self.value(b), tb)?;
        self.push(Op::MatMul { a, ta, b, tb }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(Op::Add(a, b), out)
    }

    /// Adds a `1×n` bias to every row of an `m×n` input.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("input {:?}, bias {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        self.push(Op::AddBias { x, bias }, out)
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, out)
    }

    /// Row-wise layer normalization with learned `1×n` gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = vx.cols();
        if vg.shape() != (1, n) || vb.shape() != (1, n) {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_n = T::one() / T::of(n as f64);
        let mut xhat = Tensor::zeros(vx.rows(), n);
        let mut out = Tensor::zeros(vx.rows(), n);
        let mut rstd = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * vg.data()[c] + vb.data()[c]);
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            out,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(gelu);
        self.push(Op::Gelu(x), out)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let mut out = vx.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::Softmax(x), out)
    }

    /// Multi-head scaled dot-product attention over `L×d` projections.
    /// Keys with `key_mask[j] == false` receive zero probability.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (len, dim) = vq.shape();
        if vk.shape() != (len, dim)
            || vv.shape() != (len, dim)
            || heads == 0
            || dim % heads != 0
            || key_mask.len() != len
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, heads {heads}, mask {}",
                    vq.shape(),
                    vk.shape(),
                    vv.shape(),
                    key_mask.len()
                ),
            ));
        }
        let head_dim = dim / heads;
        let scale = T::one() / T::of(head_dim as f64).sqrt();
        let mut out = Tensor::zeros(len, dim);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = column_block(vq, h * head_dim, head_dim);
            let kh = column_block(vk, h * head_dim, head_dim);
            let vh = column_block(vv, h * head_dim, head_dim);
            let mut p = Tensor::matmul(&qh, false, &kh, true)?;
            for r in 0..len {
                let row = p.row_mut(r);
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if key_mask[j] {
                        *s * scale
                    } else {
                        T::neg_infinity()
                    };
                }
                softmax_in_place(row);
            }
            let oh = Tensor::matmul(&p, false, &vh, false)?;
            for r in 0..len {
                out.row_mut(r)[h * head_dim..(h + 1) * head_dim].copy_from_slice(oh.row(r));
            }
            probs.push(p);
        }
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            out,
        )
    }

    /// Inverted dropout; `drop_prob <= 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, drop_prob: f64, rng: &mut R) -> Result<NodeId> {
        if drop_prob <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - drop_prob;
        let scale = T::of(1.0 / keep);
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let mut out = vx.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(Op::Dropout { x, mask }, out)
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.rows()) {
            return Err(Error::PositionOutOfRange {
                position: bad,
                len: vx.rows(),
            });
        }
        let mut out = Tensor::zeros(rows.len(), vx.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vx.row(r));
        }
        self.push(
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            out,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("expected {cols} columns, got {}", v.cols()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`, as a `1×1`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.rows() != targets.len() || vl.rows() == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} targets", vl.shape(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vl.cols()) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {bad} out of range for {} classes", vl.cols()),
            ));
        }
        let mut probs = vl.clone();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = vl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let log_z = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += log_z - row[t];
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let loss = total / T::of(targets.len() as f64);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// `Σ w_i · x_i` over `1×1` inputs.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut total = T::zero();
        for &(id, w) in terms {
            let v = self.value(id);
            if v.shape() != (1, 1) {
                return Err(Error::shape("weighted_sum", format!("term of shape {:?}", v.shape())));
            }
            total += w * v.item();
        }
        self.push(Op::WeightedSum(terms.to_vec()), Tensor::scalar(total))
    }

    /// Back-propagates from `root`. `seed` defaults to ones (the usual choice
    /// for a scalar loss). Parameter gradients are added into `param_grads`.
    pub fn backward(
        &self,
        root: NodeId,
        seed: Option<Tensor<T>>,
        param_grads: &mut ParamGrads<T>,
    ) -> Result<NodeGrads<T>> {
        let root_shape = self.value(root).shape();
        let seed = match seed {
            Some(s) if s.shape() != root_shape => {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} for root {:?}", s.shape(), root_shape),
                ))
            }
            Some(s) => s,
            None => Tensor::full(root_shape.0, root_shape.1, T::one()),
        };
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &dy, &mut grads, param_grads)?;
            grads[idx] = Some(dy);
        }
        Ok(NodeGrads { grads })
    }

    fn backward_node(
        &self,
        idx: usize,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        param_grads: &mut ParamGrads<T>,
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Param(index) => param_grads.accumulate(*index, dy),
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let g = grad_slot(grads, *table, t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &d) in g.row_mut(id).iter_mut().zip(dy.row(r)) {
                        *o += d;
                    }
                }
            }
            Op::MatMul { a, ta, b, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                // C = op(A)·op(B)
                {
                    let g = grad_slot(grads, *a, va.rows(), va.cols());
                    if *ta {
                        Tensor::gemm_into(g, T::one(), vb, *tb, dy, true, T::one())?;
                    } else {
                        Tensor::gemm_into(g, T::one(), dy, false, vb, !*tb, T::one())?;
                    }
                }
                {
                    let g = grad_slot(grads, *b, vb.rows(), vb.cols());
                    if *tb {
                        Tensor::gemm_into(g, T::one(), dy, true, va, *ta, T::one())?;
                    } else {
                        Tensor::gemm_into(g, T::one(), va, !*ta, dy, false, T::one())?;
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy);
                accumulate(grads, *b, dy);
            }
            Op::AddBias { x, bias } => {
                accumulate(grads, *x, dy);
                let g = grad_slot(grads, *bias, 1, dy.cols());
                for r in 0..dy.rows() {
                    for (o, &d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                        *o += d;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let scaled = dy.map(|d| d * *factor);
                accumulate(grads, *x, &scaled);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vg = self.value(*gamma);
                let n = dy.cols();
                let inv_n = T::one() / T::of(n as f64);
                {
                    let gg = grad_slot(grads, *gamma, 1, n);
                    for r in 0..dy.rows() {
                        for c in 0..n {
                            gg.data_mut()[c] += dy.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                {
                    let gb = grad_slot(grads, *beta, 1, n);
                    for r in 0..dy.rows() {
                        for (o, &d) in gb.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                }
                let gx = grad_slot(grads, *x, dy.rows(), n);
                let mut dxhat = vec![T::zero(); n];
                for r in 0..dy.rows() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for c in 0..n {
                        dxhat[c] = dy.get(r, c) * vg.data()[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat.get(r, c);
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    let row = gx.row_mut(r);
                    for c in 0..n {
                        row[c] += rstd[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let g = grad_slot(grads, *x, vx.rows(), vx.cols());
                for ((o, &v), &d) in g.data_mut().iter_mut().zip(vx.data()).zip(dy.data()) {
                    *o += d * gelu_derivative(v);
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.as_ref().expect("softmax value");
                let g = grad_slot(grads, *x, y.rows(), y.cols());
                for r in 0..y.rows() {
                    softmax_backward_row(y.row(r), dy.row(r), g.row_mut(r));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (len, dim) = vq.shape();
                let head_dim = dim / heads;
                let scale = T::one() / T::of(head_dim as f64).sqrt();
                let mut dq = Tensor::zeros(len, dim);
                let mut dk = Tensor::zeros(len, dim);
                let mut dv = Tensor::zeros(len, dim);
                for (h, p) in probs.iter().enumerate() {
                    let off = h * head_dim;
                    let qh = column_block(vq, off, head_dim);
                    let kh = column_block(vk, off, head_dim);
                    let vh = column_block(vv, off, head_dim);
                    let doh = column_block(dy, off, head_dim);
                    let dvh = Tensor::matmul(p, true, &doh, false)?;
                    let dp = Tensor::matmul(&doh, false, &vh, true)?;
                    let mut ds = Tensor::zeros(len, len);
                    for r in 0..len {
                        softmax_backward_row(p.row(r), dp.row(r), ds.row_mut(r));
                    }
                    ds.scale_assign(scale);
                    let dqh = Tensor::matmul(&ds, false, &kh, false)?;
                    let dkh = Tensor::matmul(&ds, true, &qh, false)?;
                    for r in 0..len {
                        dq.row_mut(r)[off..off + head_dim].copy_from_slice(dqh.row(r));
                        dk.row_mut(r)[off..off + head_dim].copy_from_slice(dkh.row(r));
                        dv.row_mut(r)[off..off + head_dim].copy_from_slice(dvh.row(r));
                    }
                }
                accumulate(grads, *q, &dq);
                accumulate(grads, *k, &dk);
                accumulate(grads, *v, &dv);
            }
            Op::Dropout { x, mask } => {
                let g = grad_slot(grads, *x, dy.rows(), dy.cols());
                for ((o, &d), &m) in g.data_mut().iter_mut().zip(dy.data()).zip(mask) {
                    *o += d * m;
                }
            }
            Op::SelectRows { x, rows } => {
                let vx = self.value(*x);
                let g = grad_slot(grads, *x, vx.rows(), vx.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &d) in g.row_mut(r).iter_mut().zip(dy.row(i)) {
                        *o += d;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let cols = dy.cols();
                    let slice = Tensor::new(
                        rows,
                        cols,
                        dy.data()[start * cols..(start + rows) * cols].to_vec(),
                    )?;
                    accumulate(grads, p, &slice);
                    start += rows;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let upstream = dy.item() / T::of(targets.len() as f64);
                let g = grad_slot(grads, *logits, probs.rows(), probs.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let row = g.row_mut(r);
                    for (o, &p) in row.iter_mut().zip(probs.row(r)) {
                        *o += upstream * p;
                    }
                    row[t] -= upstream;
                }
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    accumulate(grads, id, &Tensor::scalar(dy.item() * w));
                }
            }
        }
        Ok(())
    }
}

fn grad_slot<T: Float>(
    grads: &mut [Option<Tensor<T>>],
    id: NodeId,
    rows: usize,
    cols: usize,
) -> &mut Tensor<T> {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: &Tensor<T>) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(delta),
        slot @ None => *slot = Some(delta.clone()),
    }
}

fn column_block<T: Float>(t: &Tensor<T>, start: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn(t.rows(), width, |r, c| t.get(r, start + c))
}

pub(crate) fn gelu<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::of(GELU_COEF) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(GELU_COEF);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Numerically stable softmax. Entries equal to `-inf` get probability 0; a
/// row with no finite entries becomes all zeros.
pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn softmax_backward_row<T: Float>(y: &[T], dy: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((o, &yi), &di) in dx.iter_mut().zip(y).zip(dy) {
        *o += yi * (di - dot);
    }
}
