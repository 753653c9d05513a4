//! Tape-based reverse-mode differentiation.
//!
//! Operations are recorded in execution order; `backward` replays the tape in
//! reverse, accumulating vector-Jacobian products. The primitive set is the
//! minimum needed to express the denoiser, the classifier, the latent codec
//! and the guidance algebra: elementwise arithmetic, matrix products, row
//! broadcasts, embedding lookups, a smooth sigmoid-weighted unit, reductions,
//! log-softmax, squared-L2 distance and opaque linear maps with an exact
//! adjoint.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_nt, matmul_tn, Tensor};
use crate::numerics::{log_softmax, sigmoid};

/// Handle to a node in a [`DiffGraph`].
pub type NodeId = usize;

/// A linear map with an exact adjoint, recordable as a single graph node.
///
/// `adjoint` must apply the transpose of the map's matrix; for orthonormal
/// maps this is the inverse.
pub trait LinearOp: Send + Sync {
    fn forward(&self, input: &Tensor) -> Result<Tensor>;
    fn adjoint(&self, upstream: &Tensor) -> Result<Tensor>;
    fn name(&self) -> &str {
        "linear"
    }
}

enum Op {
    Var,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Row-broadcast add: matrix [B,H] + vector [H].
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// Row lookup into a table [R,H]; one output row per index.
    EmbedRows(NodeId, Vec<usize>),
    /// x · sigmoid(x), elementwise.
    Silu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Log-softmax over the last axis (rank 1 or 2).
    LogSoftmax(NodeId),
    /// Per-row column pick from a matrix [B,K] -> vector [B].
    GatherRows(NodeId, Vec<usize>),
    /// Single flat-index pick -> scalar.
    Select(NodeId, usize),
    /// ‖a − b‖² -> scalar.
    SquaredDiff(NodeId, NodeId),
    Reshape(NodeId),
    Linear(NodeId, Arc<dyn LinearOp>),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// A recording of primitive operations over tensors.
///
/// A graph is confined to one thread; independent graphs may run in
/// parallel. Inputs registered with [`DiffGraph::var`] are differentiable;
/// [`DiffGraph::constant`] leaves are not, and no gradient is materialized
/// for anything that depends only on constants.
#[derive(Default)]
pub struct DiffGraph {
    nodes: Vec<Node>,
}

impl DiffGraph {
    pub fn new() -> Self {
        DiffGraph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a differentiable input.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(Node {
            op: Op::Var,
            value,
            needs_grad: true,
        })
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Node {
            op: Op::Const,
            value,
            needs_grad: false,
        })
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId, context: &str) -> Result<()> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Graph(format!("{context}: node {id} not in graph")))
        }
    }

    fn record(&mut self, op: Op, value: Tensor, inputs: &[NodeId], context: &str) -> Result<NodeId> {
        value.ensure_finite(context)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(Node { op, value, needs_grad }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        let value = self.nodes[a].value.add(&self.nodes[b].value)?;
        self.record(Op::Add(a, b), value, &[a, b], "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "sub")?;
        self.check(b, "sub")?;
        let value = self.nodes[a].value.sub(&self.nodes[b].value)?;
        self.record(Op::Sub(a, b), value, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "mul")?;
        self.check(b, "mul")?;
        let value = self.nodes[a].value.mul(&self.nodes[b].value)?;
        self.record(Op::Mul(a, b), value, &[a, b], "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a, "scale")?;
        let value = self.nodes[a].value.scale(c);
        self.record(Op::Scale(a, c), value, &[a], "scale")
    }

    pub fn add_row(&mut self, matrix: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(matrix, "add_row")?;
        self.check(row, "add_row")?;
        let (b, h) = self.nodes[matrix].value.dims2("add_row matrix")?;
        let rv = &self.nodes[row].value;
        if rv.shape() != [h] {
            return Err(Error::shape(
                "add_row",
                format!("matrix [{b},{h}] vs row {:?}", rv.shape()),
            ));
        }
        let mut data = self.nodes[matrix].value.data().to_vec();
        for r in 0..b {
            for j in 0..h {
                data[r * h + j] += rv.data()[j];
            }
        }
        let value = Tensor::from_raw(vec![b, h], data);
        self.record(Op::AddRow(matrix, row), value, &[matrix, row], "add_row")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let value = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        self.record(Op::MatMul(a, b), value, &[a, b], "matmul")
    }

    pub fn embed_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(table, "embed_rows")?;
        let (rows, h) = self.nodes[table].value.dims2("embed_rows table")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "embed_rows: index {bad} out of {rows} table rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * h);
        for &i in indices {
            data.extend_from_slice(self.nodes[table].value.row(i));
        }
        let value = Tensor::from_raw(vec![indices.len(), h], data);
        self.record(Op::EmbedRows(table, indices.to_vec()), value, &[table], "embed_rows")
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "silu")?;
        let value = self.nodes[a].value.map(|x| x * sigmoid(x));
        self.record(Op::Silu(a), value, &[a], "silu")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "sum")?;
        let value = Tensor::from_raw(vec![1], vec![self.nodes[a].value.sum()]);
        self.record(Op::Sum(a), value, &[a], "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "mean")?;
        if self.nodes[a].value.is_empty() {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let value = Tensor::from_raw(vec![1], vec![self.nodes[a].value.mean()]);
        self.record(Op::Mean(a), value, &[a], "mean")
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "log_softmax")?;
        let value = log_softmax(&self.nodes[a].value)?;
        self.record(Op::LogSoftmax(a), value, &[a], "log_softmax")
    }

    pub fn gather_rows(&mut self, matrix: NodeId, cols: &[usize]) -> Result<NodeId> {
        self.check(matrix, "gather_rows")?;
        let (b, k) = self.nodes[matrix].value.dims2("gather_rows matrix")?;
        if cols.len() != b {
            return Err(Error::shape(
                "gather_rows",
                format!("{} rows vs {} indices", b, cols.len()),
            ));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: column {bad} out of {k}"
            )));
        }
        let data: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| self.nodes[matrix].value.data()[r * k + c])
            .collect();
        let value = Tensor::from_raw(vec![b], data);
        self.record(Op::GatherRows(matrix, cols.to_vec()), value, &[matrix], "gather_rows")
    }

    pub fn select(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        self.check(a, "select")?;
        if index >= self.nodes[a].value.len() {
            return Err(Error::InvalidArgument(format!(
                "select: index {index} out of {}",
                self.nodes[a].value.len()
            )));
        }
        let value = Tensor::from_raw(vec![1], vec![self.nodes[a].value.data()[index]]);
        self.record(Op::Select(a, index), value, &[a], "select")
    }

    pub fn squared_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "squared_diff")?;
        self.check(b, "squared_diff")?;
        let d = self.nodes[a].value.squared_distance(&self.nodes[b].value)?;
        let value = Tensor::from_raw(vec![1], vec![d]);
        self.record(Op::SquaredDiff(a, b), value, &[a, b], "squared_diff")
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(a, "reshape")?;
        let value = self.nodes[a].value.reshape(shape)?;
        self.record(Op::Reshape(a), value, &[a], "reshape")
    }

    pub fn linear(&mut self, a: NodeId, op: Arc<dyn LinearOp>) -> Result<NodeId> {
        self.check(a, "linear")?;
        let value = op.forward(&self.nodes[a].value)?;
        let name = op.name().to_string();
        self.record(Op::Linear(a, op), value, &[a], &name)
    }

    /// Reverse sweep from a scalar output. Returns one gradient slot per node;
    /// slots for constants and for nodes the output does not depend on are
    /// `None`.
    pub fn backward(&self, output: NodeId) -> Result<Vec<Option<Tensor>>> {
        self.check(output, "backward")?;
        if !self.nodes[output].value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward: output has shape {:?}, expected a scalar",
                self.nodes[output].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[output].needs_grad {
            return Ok(grads);
        }
        grads[output] = Some(Tensor::from_raw(vec![1], vec![1.0]));

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            g.ensure_finite("backward")?;
            match &self.nodes[id].op {
                Op::Var => {
                    grads[id] = Some(g);
                }
                Op::Const => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(&self.nodes[*b].value)?;
                    let gb = g.mul(&self.nodes[*a].value)?;
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, *a, g.scale(*c));
                }
                Op::AddRow(m, r) => {
                    if self.nodes[*r].needs_grad {
                        let (b, h) = g.dims2("AddRow backward")?;
                        let mut col = vec![0.0; h];
                        for row in 0..b {
                            for j in 0..h {
                                col[j] += g.data()[row * h + j];
                            }
                        }
                        self.accumulate(&mut grads, *r, Tensor::from_raw(vec![h], col));
                    }
                    self.accumulate(&mut grads, *m, g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[*a].value.dims2("MatMul backward")?;
                    let n = self.nodes[*b].value.shape()[1];
                    if self.nodes[*a].needs_grad {
                        // dA = dC · Bᵀ
                        let da = matmul_nt(&g, &self.nodes[*b].value, m, n, k);
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[*b].needs_grad {
                        // dB = Aᵀ · dC
                        let db = matmul_tn(&self.nodes[*a].value, &g, m, k, n);
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::EmbedRows(table, indices) => {
                    let (rows, h) = self.nodes[*table].value.dims2("EmbedRows backward")?;
                    let mut dt = vec![0.0; rows * h];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..h {
                            dt[i * h + j] += g.data()[r * h + j];
                        }
                    }
                    self.accumulate(&mut grads, *table, Tensor::from_raw(vec![rows, h], dt));
                }
                Op::Silu(a) => {
                    // d/dx [x·σ(x)] = σ(x)·(1 + x·(1 − σ(x)))
                    let x = &self.nodes[*a].value;
                    let dx = g.zip(x, "Silu backward", |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })?;
                    self.accumulate(&mut grads, *a, dx);
                }
                Op::Sum(a) => {
                    let gv = g.item()?;
                    let shape = self.nodes[*a].value.shape().to_vec();
                    self.accumulate(&mut grads, *a, Tensor::filled(&shape, gv)?);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len() as f64;
                    let gv = g.item()? / n;
                    let shape = self.nodes[*a].value.shape().to_vec();
                    self.accumulate(&mut grads, *a, Tensor::filled(&shape, gv)?);
                }
                Op::LogSoftmax(a) => {
                    // per row: dx = g − softmax(x)·Σ g
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[id].value; // log-probabilities
                    let k = *x.shape().last().unwrap();
                    let rows = x.len() / k;
                    let mut dx = vec![0.0; x.len()];
                    for r in 0..rows {
                        let gr = &g.data()[r * k..(r + 1) * k];
                        let yr = &y.data()[r * k..(r + 1) * k];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..k {
                            dx[r * k + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::from_raw(x.shape().to_vec(), dx));
                }
                Op::GatherRows(m, cols) => {
                    let (b, k) = self.nodes[*m].value.dims2("GatherRows backward")?;
                    let mut dm = vec![0.0; b * k];
                    for (r, &c) in cols.iter().enumerate() {
                        dm[r * k + c] += g.data()[r];
                    }
                    self.accumulate(&mut grads, *m, Tensor::from_raw(vec![b, k], dm));
                }
                Op::Select(a, index) => {
                    let mut da = vec![0.0; self.nodes[*a].value.len()];
                    da[*index] = g.item()?;
                    self.accumulate(
                        &mut grads,
                        *a,
                        Tensor::from_raw(self.nodes[*a].value.shape().to_vec(), da),
                    );
                }
                Op::SquaredDiff(a, b) => {
                    let gv = g.item()?;
                    let diff = self.nodes[*a].value.sub(&self.nodes[*b].value)?;
                    if self.nodes[*a].needs_grad {
                        self.accumulate(&mut grads, *a, diff.scale(2.0 * gv));
                    }
                    if self.nodes[*b].needs_grad {
                        self.accumulate(&mut grads, *b, diff.scale(-2.0 * gv));
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[*a].value.shape().to_vec();
                    self.accumulate(&mut grads, *a, g.reshape(shape)?);
                }
                Op::Linear(a, op) => {
                    let da = op.adjoint(&g)?;
                    self.accumulate(&mut grads, *a, da);
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        grads[id] = Some(match grads[id].take() {
            Some(existing) => existing
                .add(&g)
                .expect("gradient accumulation shape invariant"),
            None => g,
        });
    }

    /// Derivative of a scalar node with respect to a flagged input, computed
    /// by reverse accumulation through every recorded node.
    pub fn grad(&self, output: NodeId, wrt: NodeId) -> Result<Tensor> {
        self.check(wrt, "grad")?;
        if !matches!(self.nodes[wrt].op, Op::Var) {
            return Err(Error::Graph(format!(
                "grad: node {wrt} is not a differentiable input"
            )));
        }
        let grads = self.backward(output)?;
        let g = match grads.into_iter().nth(wrt).flatten() {
            Some(g) => g,
            None => Tensor::zeros(self.nodes[wrt].value.shape()),
        };
        g.ensure_finite("grad")?;
        Ok(g)
    }
}
