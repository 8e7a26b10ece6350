//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is built symbolically: parameter placeholders, constants and
//! primitive ops, each referring only to nodes created before it. The graph
//! is then evaluated against a set of named parameter bindings, and
//! [`Graph::gradients`] walks it backwards from a scalar node to produce the
//! gradient of every bound parameter.
//!
//! Broadcasting is limited to scalar-with-tensor for the elementwise binary
//! ops. Anything else needs an explicit reshape or a matmul against a
//! constant (e.g. a column of ones to replicate a bias row).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Named parameter tensors.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Param(String),
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Logistic(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    LayerNorm { input: NodeId, eps: f64 },
    Mean(NodeId),
    Sum(NodeId),
    IndexSelect { input: NodeId, indices: Vec<usize> },
    CausalMask { input: NodeId, fill: f64 },
    Clamp { input: NodeId, lo: f64, hi: f64 },
    Minimum(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Gather { .. } => "gather",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Logistic(_) => "logistic",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::IndexSelect { .. } => "index_select",
            Op::CausalMask { .. } => "causal_mask",
            Op::Clamp { .. } => "clamp",
            Op::Minimum(..) => "minimum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// Symbolic computation graph with cached forward values.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(Node { op, value: None });
        self.nodes.len() - 1
    }

    /// Placeholder for a named parameter. Repeated calls with the same name
    /// return the same node.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param(String::from(name)));
        self.params.insert(String::from(name), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Gather { table, ids })
    }
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }
    /// Concatenation of rank-2 tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, inputs: Vec<NodeId>, axis: usize) -> NodeId {
        self.push(Op::Concat { inputs, axis })
    }
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }
    pub fn logistic(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Logistic(a))
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }
    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, input: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { input, eps })
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    /// Entries (rank 1) or rows (rank 2) selected along axis 0.
    pub fn index_select(&mut self, input: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::IndexSelect { input, indices })
    }
    /// Square score matrix with entries above the diagonal replaced by `fill`.
    pub fn causal_mask(&mut self, input: NodeId, fill: f64) -> NodeId {
        self.push(Op::CausalMask { input, fill })
    }
    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp { input, lo, hi })
    }
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Minimum(a, b))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Forward value of a node after [`Graph::evaluate`].
    pub fn value(&self, node: NodeId) -> Result<&Tensor> {
        self.nodes.get(node).and_then(|n| n.value.as_ref()).ok_or(Error::NotEvaluated)
    }

    pub fn scalar_value(&self, node: NodeId) -> Result<f64> {
        let v = self.value(node)?;
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss { node, shape: v.shape().to_vec() });
        }
        Ok(v.item())
    }

    /// Computes every node's forward value from the parameter bindings.
    pub fn evaluate(&mut self, bindings: &ParamMap) -> Result<()> {
        for node in &mut self.nodes {
            node.value = None;
        }
        for id in 0..self.nodes.len() {
            let out = self.forward_node(id, bindings)?;
            if !out.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("output of node {id} ({})", self.nodes[id].op.name()),
                });
            }
            self.nodes[id].value = Some(out);
        }
        Ok(())
    }

    /// Evaluates only the nodes appended since the last evaluation, reusing
    /// every cached value.
    pub fn evaluate_pending(&mut self, bindings: &ParamMap) -> Result<()> {
        for id in 0..self.nodes.len() {
            if self.nodes[id].value.is_some() {
                continue;
            }
            let out = self.forward_node(id, bindings)?;
            if !out.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("output of node {id} ({})", self.nodes[id].op.name()),
                });
            }
            self.nodes[id].value = Some(out);
        }
        Ok(())
    }

    fn input(&self, id: NodeId, of: NodeId) -> Result<&Tensor> {
        if id >= of {
            return Err(self.mismatch(of, format!("input {id} is not an earlier node")));
        }
        self.value(id)
    }

    fn mismatch(&self, node: NodeId, detail: String) -> Error {
        Error::ShapeMismatch { node, op: self.nodes[node].op.name(), detail }
    }

    fn forward_node(&self, id: NodeId, bindings: &ParamMap) -> Result<Tensor> {
        let op = &self.nodes[id].op;
        Ok(match op {
            Op::Param(name) => {
                let t = bindings.get(name).ok_or_else(|| Error::UnboundParameter(name.clone()))?;
                if !t.is_finite() {
                    return Err(Error::NonFinite { context: format!("binding `{name}`") });
                }
                t.clone()
            }
            Op::Const(t) => {
                if !t.is_finite() {
                    return Err(Error::NonFinite { context: format!("constant node {id}") });
                }
                t.clone()
            }
            Op::Add(a, b) => self.binary(id, *a, *b, |x, y| x + y)?,
            Op::Sub(a, b) => self.binary(id, *a, *b, |x, y| x - y)?,
            Op::Mul(a, b) => self.binary(id, *a, *b, |x, y| x * y)?,
            Op::Minimum(a, b) => self.binary(id, *a, *b, |x, y| if x <= y { x } else { y })?,
            Op::Scale(a, s) => self.unary(id, *a, |x| x * s)?,
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.input(*a, id)?, self.input(*b, id)?);
                if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
                    return Err(self.mismatch(id, format!("{:?} x {:?}", ta.shape(), tb.shape())));
                }
                matmul(ta, tb)
            }
            Op::Gather { table, ids } => {
                let t = self.input(*table, id)?;
                if t.shape().len() != 2 {
                    return Err(self.mismatch(id, format!("table must be rank 2, got {:?}", t.shape())));
                }
                let (rows, cols) = (t.shape()[0], t.shape()[1]);
                if ids.is_empty() {
                    return Err(self.mismatch(id, String::from("no ids")));
                }
                let mut data = Vec::with_capacity(ids.len() * cols);
                for &i in ids {
                    if i >= rows {
                        return Err(self.mismatch(id, format!("id {i} out of {rows} rows")));
                    }
                    data.extend_from_slice(t.row(i));
                }
                Tensor::new(vec![ids.len(), cols], data)?
            }
            Op::Transpose(a) => {
                let t = self.input(*a, id)?;
                if t.shape().len() != 2 {
                    return Err(self.mismatch(id, format!("rank-2 required, got {:?}", t.shape())));
                }
                transpose(t)
            }
            Op::Reshape(a, shape) => {
                let t = self.input(*a, id)?;
                if shape.iter().product::<usize>() != t.len() || shape.contains(&0) {
                    return Err(self.mismatch(id, format!("{:?} -> {:?}", t.shape(), shape)));
                }
                t.clone().with_shape(shape)
            }
            Op::Concat { inputs, axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|&i| self.input(i, id)).collect::<Result<_>>()?;
                self.concat_forward(id, &parts, *axis)?
            }
            Op::Softmax(a) => {
                let t = self.input(*a, id)?;
                let mut out = t.clone();
                for r in out.data_mut().chunks_mut(t.cols()) {
                    softmax_row(r);
                }
                out
            }
            Op::LogSoftmax(a) => {
                let t = self.input(*a, id)?;
                let mut out = t.clone();
                for r in out.data_mut().chunks_mut(t.cols()) {
                    log_softmax_row(r);
                }
                out
            }
            Op::Logistic(a) => self.unary(id, *a, logistic)?,
            Op::Log(a) => self.unary(id, *a, libm::log)?,
            Op::Exp(a) => self.unary(id, *a, libm::exp)?,
            Op::Relu(a) => self.unary(id, *a, |x| if x > 0.0 { x } else { 0.0 })?,
            Op::LayerNorm { input, eps } => {
                let t = self.input(*input, id)?;
                let mut out = t.clone();
                for r in out.data_mut().chunks_mut(t.cols()) {
                    let n = r.len() as f64;
                    let mu = r.iter().sum::<f64>() / n;
                    let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    for x in r.iter_mut() {
                        *x = (*x - mu) * inv;
                    }
                }
                out
            }
            Op::Mean(a) => {
                let t = self.input(*a, id)?;
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::Sum(a) => Tensor::scalar(self.input(*a, id)?.data().iter().sum()),
            Op::IndexSelect { input, indices } => {
                let t = self.input(*input, id)?;
                if t.shape().len() > 2 || indices.is_empty() {
                    return Err(self.mismatch(id, format!("rank-1/2 input and indices required, got {:?}", t.shape())));
                }
                let (rows, width) = if t.shape().len() == 1 { (t.len(), 1) } else { (t.shape()[0], t.shape()[1]) };
                let mut data = Vec::with_capacity(indices.len() * width);
                for &i in indices {
                    if i >= rows {
                        return Err(self.mismatch(id, format!("index {i} out of {rows}")));
                    }
                    data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
                }
                let shape = if t.shape().len() == 1 { vec![indices.len()] } else { vec![indices.len(), width] };
                Tensor::new(shape, data)?
            }
            Op::CausalMask { input, fill } => {
                let t = self.input(*input, id)?;
                if t.shape().len() != 2 || t.shape()[0] != t.shape()[1] {
                    return Err(self.mismatch(id, format!("square matrix required, got {:?}", t.shape())));
                }
                let n = t.shape()[0];
                let mut out = t.clone();
                let d = out.data_mut();
                for i in 0..n {
                    for j in (i + 1)..n {
                        d[i * n + j] = *fill;
                    }
                }
                out
            }
            Op::Clamp { input, lo, hi } => self.unary(id, *input, |x| x.max(*lo).min(*hi))?,
        })
    }

    fn unary(&self, id: NodeId, a: NodeId, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.input(a, id)?;
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data)
    }

    fn binary(&self, id: NodeId, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.input(a, id)?, self.input(b, id)?);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.is_scalar() && tb.shape().len() == 1 {
            let y = tb.item();
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.is_scalar() && ta.shape().len() == 1 {
            let x = ta.item();
            Tensor::new(tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            Err(self.mismatch(id, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    fn concat_forward(&self, id: NodeId, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() || axis > 1 || parts.iter().any(|p| p.shape().len() != 2) {
            return Err(self.mismatch(id, String::from("rank-2 inputs and axis 0 or 1 required")));
        }
        let other = 1 - axis;
        let fixed = parts[0].shape()[other];
        if parts.iter().any(|p| p.shape()[other] != fixed) {
            let shapes: Vec<&[usize]> = parts.iter().map(|p| p.shape()).collect();
            return Err(self.mismatch(id, format!("incompatible shapes {shapes:?}")));
        }
        if axis == 0 {
            let rows = parts.iter().map(|p| p.shape()[0]).sum();
            let mut data = Vec::with_capacity(rows * fixed);
            for p in parts {
                data.extend_from_slice(p.data());
            }
            Tensor::new(vec![rows, fixed], data)
        } else {
            let cols: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let mut data = Vec::with_capacity(fixed * cols);
            for r in 0..fixed {
                for p in parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            Tensor::new(vec![fixed, cols], data)
        }
    }

    /// Gradients of the scalar `loss` with respect to every parameter
    /// placeholder. Parameters the loss does not depend on get zeros.
    pub fn gradients(&self, loss: NodeId) -> Result<ParamMap> {
        let grads = self.backward(loss)?;
        let mut out = ParamMap::new();
        for (name, &id) in &self.params {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.value(id)?.shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        let lv = self.nodes.get(loss).and_then(|n| n.value.as_ref()).ok_or(Error::NotEvaluated)?;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss { node: loss, shape: lv.shape().to_vec() });
        }
        // Pass-local accumulator arena; the graph itself is not mutated.
        let mut grads: Vec<Option<Tensor>> = vec![None; loss + 1];
        grads[loss] = Some(Tensor::filled(lv.shape(), 1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |n: NodeId| self.value(n);
        match &self.nodes[id].op {
            Op::Param(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                accumulate_broadcast(grads, *a, val(*a)?, g.data(), 1.0);
                accumulate_broadcast(grads, *b, val(*b)?, g.data(), 1.0);
            }
            Op::Sub(a, b) => {
                accumulate_broadcast(grads, *a, val(*a)?, g.data(), 1.0);
                accumulate_broadcast(grads, *b, val(*b)?, g.data(), -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a)?, val(*b)?);
                let ga: Vec<f64> = g.data().iter().enumerate().map(|(i, &gi)| gi * broadcast_at(tb, i)).collect();
                let gb: Vec<f64> = g.data().iter().enumerate().map(|(i, &gi)| gi * broadcast_at(ta, i)).collect();
                accumulate_broadcast(grads, *a, ta, &ga, 1.0);
                accumulate_broadcast(grads, *b, tb, &gb, 1.0);
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (val(*a)?, val(*b)?);
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for (i, &gi) in g.data().iter().enumerate() {
                    if broadcast_at(ta, i) <= broadcast_at(tb, i) {
                        ga[i] = gi;
                    } else {
                        gb[i] = gi;
                    }
                }
                accumulate_broadcast(grads, *a, ta, &ga, 1.0);
                accumulate_broadcast(grads, *b, tb, &gb, 1.0);
            }
            Op::Scale(a, s) => accumulate(grads, *a, val(*a)?.shape(), g.data().iter().map(|x| x * s)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a)?, val(*b)?);
                let ga = matmul_nt(g, tb);
                let gb = matmul_tn(ta, g);
                accumulate(grads, *a, ta.shape(), ga.into_data().into_iter());
                accumulate(grads, *b, tb.shape(), gb.into_data().into_iter());
            }
            Op::Gather { table, ids } => {
                let t = val(*table)?;
                let cols = t.cols();
                let slot = grads[*table].get_or_insert_with(|| Tensor::zeros(t.shape()));
                let d = slot.data_mut();
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += g.data()[r * cols + c];
                    }
                }
            }
            Op::Transpose(a) => {
                let gt = transpose(g);
                accumulate(grads, *a, val(*a)?.shape(), gt.into_data().into_iter());
            }
            Op::Reshape(a, _) => accumulate(grads, *a, val(*a)?.shape(), g.data().iter().copied()),
            Op::Concat { inputs, axis } => {
                let out_cols = g.cols();
                let mut offset = 0;
                for &inp in inputs {
                    let t = val(inp)?;
                    let (rows, cols) = (t.shape()[0], t.shape()[1]);
                    let mut part = Vec::with_capacity(rows * cols);
                    if *axis == 0 {
                        part.extend_from_slice(&g.data()[offset * cols..(offset + rows) * cols]);
                        offset += rows;
                    } else {
                        for r in 0..rows {
                            part.extend_from_slice(&g.data()[r * out_cols + offset..r * out_cols + offset + cols]);
                        }
                        offset += cols;
                    }
                    accumulate(grads, inp, t.shape(), part.into_iter());
                }
            }
            Op::Softmax(a) => {
                let y = self.value(id)?;
                let cols = y.cols();
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    ga.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                accumulate(grads, *a, y.shape(), ga.into_iter());
            }
            Op::LogSoftmax(a) => {
                let y = self.value(id)?;
                let cols = y.cols();
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let gsum: f64 = gr.iter().sum();
                    ga.extend(yr.iter().zip(gr).map(|(y, g)| g - libm::exp(*y) * gsum));
                }
                accumulate(grads, *a, y.shape(), ga.into_iter());
            }
            Op::Logistic(a) => {
                let y = self.value(id)?;
                let it = y.data().iter().zip(g.data()).map(|(y, g)| g * y * (1.0 - y));
                accumulate(grads, *a, y.shape(), it);
            }
            Op::Log(a) => {
                let x = val(*a)?;
                accumulate(grads, *a, x.shape(), x.data().iter().zip(g.data()).map(|(x, g)| g / x));
            }
            Op::Exp(a) => {
                let y = self.value(id)?;
                accumulate(grads, *a, y.shape(), y.data().iter().zip(g.data()).map(|(y, g)| g * y));
            }
            Op::Relu(a) => {
                let x = val(*a)?;
                let it = x.data().iter().zip(g.data()).map(|(x, g)| if *x > 0.0 { *g } else { 0.0 });
                accumulate(grads, *a, x.shape(), it);
            }
            Op::LayerNorm { input, eps } => {
                let x = val(*input)?;
                let y = self.value(id)?;
                let cols = x.cols();
                let n = cols as f64;
                let mut gx = Vec::with_capacity(x.len());
                for ((xr, yr), gr) in x.data().chunks(cols).zip(y.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    let mu = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gymean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    gx.extend(gr.iter().zip(yr).map(|(g, y)| inv * (g - gmean - y * gymean)));
                }
                accumulate(grads, *input, x.shape(), gx.into_iter());
            }
            Op::Mean(a) => {
                let x = val(*a)?;
                let s = g.item() / x.len() as f64;
                accumulate(grads, *a, x.shape(), core::iter::repeat_n(s, x.len()));
            }
            Op::Sum(a) => {
                let x = val(*a)?;
                accumulate(grads, *a, x.shape(), core::iter::repeat_n(g.item(), x.len()));
            }
            Op::IndexSelect { input, indices } => {
                let x = val(*input)?;
                let width = if x.shape().len() == 1 { 1 } else { x.shape()[1] };
                let slot = grads[*input].get_or_insert_with(|| Tensor::zeros(x.shape()));
                let d = slot.data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..width {
                        d[i * width + c] += g.data()[r * width + c];
                    }
                }
            }
            Op::CausalMask { input, .. } => {
                let n = g.shape()[0];
                let it = g.data().iter().enumerate().map(|(k, &v)| if k % n > k / n { 0.0 } else { v });
                accumulate(grads, *input, g.shape(), it);
            }
            Op::Clamp { input, lo, hi } => {
                let x = val(*input)?;
                let it = x.data().iter().zip(g.data()).map(|(x, g)| if *x >= *lo && *x <= *hi { *g } else { 0.0 });
                accumulate(grads, *input, x.shape(), it);
            }
        }
        Ok(())
    }
}

fn broadcast_at(t: &Tensor, i: usize) -> f64 {
    if t.len() == 1 { t.data()[0] } else { t.data()[i] }
}

fn accumulate(grads: &mut [Option<Tensor>], node: NodeId, shape: &[usize], values: impl Iterator<Item = f64>) {
    let slot = grads[node].get_or_insert_with(|| Tensor::zeros(shape));
    for (d, v) in slot.data_mut().iter_mut().zip(values) {
        *d += v;
    }
}

/// Accumulates `g * sign`, summing down to one value when `target` is a
/// broadcast scalar.
fn accumulate_broadcast(grads: &mut [Option<Tensor>], node: NodeId, target: &Tensor, g: &[f64], sign: f64) {
    if target.len() == g.len() {
        accumulate(grads, node, target.shape(), g.iter().map(|v| v * sign));
    } else {
        let total: f64 = g.iter().sum();
        accumulate(grads, node, target.shape(), core::iter::once(total * sign));
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

/// `a * b^T` without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &a.data()[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b.data()[j * k..(j + 1) * k];
            out.push(ar.iter().zip(br).map(|(x, y)| x * y).sum());
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul_nt shape")
}

/// `a^T * b` without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..k {
        let br = &b.data()[i * n..(i + 1) * n];
        for p in 0..m {
            let aip = a.data()[i * m + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul_tn shape")
}

pub(crate) fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose shape")
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn softmax_row(r: &mut [f64]) {
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in r.iter_mut() {
        *x = libm::exp(*x - max);
        total += *x;
    }
    for x in r.iter_mut() {
        *x /= total;
    }
}

pub fn log_softmax_row(r: &mut [f64]) {
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(r.iter().map(|x| libm::exp(x - max)).sum::<f64>());
    for x in r.iter_mut() {
        *x -= lse;
    }
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

/// Compares analytic gradients against central differences over every
/// parameter entry.
///
/// `loss_fn` returns the loss and its analytic gradient map. The relative
/// error per entry is `|analytic - fd| / max(1e-8, |fd|)`.
pub fn finite_difference_check<F>(loss_fn: F, params: &ParamMap, h: f64) -> Result<FdReport>
where
    F: Fn(&ParamMap) -> Result<(f64, ParamMap)>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, analytic) = loss_fn(params)?;
    let mut probe = params.clone();
    let mut report = FdReport { max_rel_error: 0.0, worst: None, entries: 0 };
    for (name, tensor) in params {
        // Parameters the loss never touches have an implicit zero gradient.
        let grad = analytic.get(name);
        for i in 0..tensor.len() {
            let x0 = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x0 + h;
            let plus = loss_fn(&probe).map_err(|e| perturbed(name, i, e))?.0;
            probe.get_mut(name).unwrap().data_mut()[i] = x0 - h;
            let minus = loss_fn(&probe).map_err(|e| perturbed(name, i, e))?.0;
            probe.get_mut(name).unwrap().data_mut()[i] = x0;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { context: format!("loss while perturbing {name}[{i}]") });
            }
            let fd = (plus - minus) / (2.0 * h);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            let err = (a - fd).abs() / fd.abs().max(1e-8);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn perturbed(name: &str, index: usize, e: Error) -> Error {
    Error::NonFinite { context: format!("perturbing {name}[{index}]: {e}") }
}
