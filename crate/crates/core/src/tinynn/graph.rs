//! Reverse-mode differentiation over a recorded tape of matrix ops.
//!
//! A [`Graph`] borrows a [`ParamSet`] immutably; parameter nodes read their
//! values in place and their gradients come back in a [`Grads`] aligned with
//! the parameter set. Only the handful of ops the guider and its tests need
//! are provided.

use std::collections::HashMap;

use super::tensor::{sigmoid, softmax, Tensor2D};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor2D>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor2D) -> ParamId {
        let name = name.into();
        let id = ParamId(self.values.len());
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor2D::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor2D {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor2D)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<Tensor2D>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            values: params
                .values
                .iter()
                .map(|t| Tensor2D::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor2D {
        &self.values[id.0]
    }

    /// For gradients computed outside a graph.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.values {
            g.scale_assign(s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, g| m.max(g.max_abs()))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor2D,
        rstd: Vec<f64>,
    },
    SoftmaxRows(NodeId),
    Cols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    Rows(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    HalfSquaredNorm(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor2D,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor2D>,
}

/// A recorded forward computation.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor2D>>,
    params: Grads,
}

impl Gradients {
    /// Gradient of the root with respect to a node, if it was reached.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor2D> {
        self.nodes[node.0].as_ref()
    }

    pub fn params(&self) -> &Grads {
        &self.params
    }

    pub fn into_params(self) -> Grads {
        self.params
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::ShapeMismatch(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        match (&self.nodes[id.0].op, &self.nodes[id.0].value) {
            (Op::Param(p), _) => self.params.get(*p),
            (_, Some(v)) => v,
            (_, None) => unreachable!("non-param node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor2D) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor2D) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let out = va.matmul(vb);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("matmul_bt", va.shape(), vb.shape()));
        }
        let out = va.matmul_bt(vb);
        Ok(self.push(Op::MatMulBt(a, b), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row", va.shape(), vr.shape()));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow(a, row), out))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(super::tensor::silu);
        self.push(Op::Silu(a), out)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1×c`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let c = vx.cols();
        if vg.shape() != (1, c) || vb.shape() != (1, c) {
            return Err(shape_err("layer_norm", vx.shape(), vg.shape()));
        }
        let mut xhat = Tensor2D::zeros(vx.rows(), c);
        let mut out = Tensor2D::zeros(vx.rows(), c);
        let mut rstd = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd.push(s);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * s;
            }
            let xh = xhat.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xh[j] * vg.data()[j] + vb.data()[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            out,
        ))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = Tensor2D::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&softmax(va.row(r)));
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Columns `start..start+len`.
    pub fn cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(Error::ShapeMismatch(format!(
                "column slice {start}+{len} of {} columns",
                va.cols()
            )));
        }
        let mut out = Tensor2D::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        Ok(self.push(Op::Cols(a, start), out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::ShapeMismatch("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor2D::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Rows `start..start+len`.
    pub fn rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + len > va.rows() {
            return Err(Error::ShapeMismatch(format!(
                "row slice {start}+{len} of {} rows",
                va.rows()
            )));
        }
        let c = va.cols();
        let out = Tensor2D::new(len, c, va.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(Op::Rows(a, start), out))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::ShapeMismatch("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor2D::new(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor2D::filled(1, 1, s))
    }

    /// `½ ‖a‖²`
    pub fn half_squared_norm(&mut self, a: NodeId) -> NodeId {
        let s = 0.5 * self.value(a).data().iter().map(|v| v * v).sum::<f64>();
        self.push(Op::HalfSquaredNorm(a), Tensor2D::filled(1, 1, s))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.rows() != targets.len() || vl.rows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: {} rows vs {} targets",
                vl.rows(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vl.cols()) {
            return Err(Error::GoldOutOfRange {
                index: bad,
                len: vl.cols(),
            });
        }
        let mut probs = Tensor2D::zeros(vl.rows(), vl.cols());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = vl.row(r);
            loss += super::tensor::log_sum_exp(row) - row[t];
            probs.row_mut(r).copy_from_slice(&softmax(row));
        }
        loss /= targets.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy"));
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor2D::filled(1, 1, loss),
        ))
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::NonScalarRoot {
                rows: rv.rows(),
                cols: rv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor2D>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor2D::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Tensor2D>], id: NodeId, g: Tensor2D) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_bt(vb));
                    acc(&mut grads, *b, va.matmul_at(&g));
                }
                Op::MatMulBt(a, b) => {
                    // out = a·bᵀ: da = g·b, db = gᵀ·a
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(vb));
                    acc(&mut grads, *b, g.matmul_at(va));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor2D::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|v| v * s)),
                Op::Silu(a) => {
                    let va = self.value(*a);
                    let mut d = g.clone();
                    for (dv, &x) in d.data_mut().iter_mut().zip(va.data()) {
                        let s = sigmoid(x);
                        *dv *= s * (1.0 + x * (1.0 - s));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let vg = self.value(*gamma);
                    let c = g.cols();
                    let mut dx = Tensor2D::zeros(g.rows(), c);
                    let mut dgamma = Tensor2D::zeros(1, c);
                    let mut dbeta = Tensor2D::zeros(1, c);
                    for r in 0..g.rows() {
                        let (gr, xh) = (g.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gr[j] * vg.data()[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                            dgamma.data_mut()[j] += gr[j] * xh[j];
                            dbeta.data_mut()[j] += gr[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        let out = dx.row_mut(r);
                        for j in 0..c {
                            let d = gr[j] * vg.data()[j];
                            out[j] = rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[i].value.as_ref().expect("softmax value");
                    let mut d = Tensor2D::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = yr[j] * (gr[j] - inner);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Cols(a, start) => {
                    let va = self.value(*a);
                    let mut d = Tensor2D::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut d = Tensor2D::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(&mut grads, *p, d);
                        off += w;
                    }
                }
                Op::Rows(a, start) => {
                    let va = self.value(*a);
                    let mut d = Tensor2D::zeros(va.rows(), va.cols());
                    let c = va.cols();
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.value(*p).shape();
                        let d = Tensor2D::new(r, c, g.data()[off..off + r * c].to_vec())?;
                        acc(&mut grads, *p, d);
                        off += r * c;
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Tensor2D::filled(r, c, g.get(0, 0)));
                }
                Op::HalfSquaredNorm(a) => {
                    let s = g.get(0, 0);
                    acc(&mut grads, *a, self.value(*a).map(|v| v * s));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = g.get(0, 0) / targets.len() as f64;
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        d.row_mut(r)[t] -= 1.0;
                    }
                    d.scale_assign(s);
                    acc(&mut grads, *logits, d);
                }
            }
            grads[i] = Some(g);
        }

        let mut params = Grads::zeros_like(self.params);
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = &grads[node.0] {
                params.values[pid.0].add_assign(g);
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}
