//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! The tape records primitive operations as nodes; inputs always reference
//! strictly earlier nodes, so a single in-order sweep evaluates any node and
//! a reverse sweep differentiates it. The backward pass is *symbolic*: it
//! appends new nodes expressing each adjoint in terms of the same primitive
//! set, so a gradient is itself a tape value and can be differentiated
//! again. Hessian-vector products and mixed second derivatives fall out of
//! running that backward-of-backward.
//!
//! The primitive set is deliberately small: add, mul, matmul, row gather,
//! mean over rows, tanh, log, exp, softmax, sum, inner product — plus the
//! structural ops their adjoints need (transpose, scatter-add, row
//! repeat/sum, reciprocal, scalar fill). Every op's adjoint stays inside
//! this set, which is what makes nesting close under differentiation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Op {
    /// Named leaf bound at evaluation time.
    Var(String),
    Const(Tensor),
    Add(NodeId, NodeId),
    /// Element-wise product of same-shaped tensors.
    Mul(NodeId, NodeId),
    /// [m,k] x [k,n] -> [m,n].
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    /// Row gather: indices into the rows of a 2-d source.
    Gather { src: NodeId, rows: Vec<usize> },
    /// Adjoint of Gather: sums rows of `src` into an `out_rows`-row output.
    ScatterAdd {
        src: NodeId,
        rows: Vec<usize>,
        out_rows: usize,
    },
    /// [n,d] -> [1,d] column means.
    MeanRows(NodeId),
    /// [n,d] -> [1,d] column sums.
    SumRows(NodeId),
    /// [1,d] -> [n,d] by repetition.
    RepeatRows { src: NodeId, count: usize },
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    /// Row softmax, restricted to [1,n].
    Softmax(NodeId),
    /// Sum of all entries -> scalar.
    Sum(NodeId),
    /// Broadcast a scalar into `shape`.
    Fill { src: NodeId, shape: Vec<usize> },
    /// Inner product of same-shaped tensors -> scalar.
    Dot(NodeId, NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Var(_) => "var",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::MeanRows(_) => "mean_rows",
            Op::SumRows(_) => "sum_rows",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Recip(_) => "recip",
            Op::Softmax(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Fill { .. } => "fill",
            Op::Dot(..) => "dot",
        }
    }

    fn inputs(&self, buf: &mut Vec<NodeId>) {
        buf.clear();
        match *self {
            Op::Var(_) | Op::Const(_) => {}
            Op::Add(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::Dot(a, b) => {
                buf.push(a);
                buf.push(b);
            }
            Op::Transpose(a)
            | Op::MeanRows(a)
            | Op::SumRows(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Softmax(a)
            | Op::Sum(a) => buf.push(a),
            Op::Gather { src, .. }
            | Op::ScatterAdd { src, .. }
            | Op::RepeatRows { src, .. }
            | Op::Fill { src, .. } => buf.push(src),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    shape: Vec<usize>,
    differentiable: bool,
}

impl Node {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

/// Gradient node ids returned by [`Tape::adjoints`].
#[derive(Debug)]
pub struct Adjoints {
    /// One gradient node per requested `wrt` node, same order.
    pub grads: Vec<NodeId>,
    /// True where the output does not depend on the node; the gradient node
    /// is then an all-zero constant and callers may want to surface a
    /// warning rather than an error.
    pub missing: Vec<bool>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vars: BTreeMap<String, NodeId>,
}

/// Name -> value map for tape variables.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    map: BTreeMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Marks a node as non-differentiable; the backward sweep errors if it
    /// must propagate through it.
    pub fn mark_non_differentiable(&mut self, id: NodeId) {
        self.nodes[id].differentiable = false;
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            differentiable: true,
        });
        id
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn expect_2d(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(self.shape_err(op, format!("expected a matrix, got {:?}", other))),
        }
    }

    // ---- construction -----------------------------------------------------

    pub fn var(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "variable `{name}` already declared"
            )));
        }
        let id = self.push(Op::Var(name.clone()), shape.to_vec());
        self.vars.insert(name, id);
        Ok(id)
    }

    pub fn var_node(&self, name: &str) -> Option<NodeId> {
        self.vars.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(self.shape_err(
                "add",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(self.shape_err(
                "mul",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.expect_2d(a, "matmul")?;
        let (kb, n) = self.expect_2d(b, "matmul")?;
        if ka != kb {
            return Err(self.shape_err("matmul", format!("inner dims {ka} vs {kb}")));
        }
        Ok(self.push(Op::Matmul(a, b), vec![m, n]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.expect_2d(a, "transpose")?;
        Ok(self.push(Op::Transpose(a), vec![c, r]))
    }

    /// Embedding-style row lookup: out[i, :] = src[rows[i], :].
    pub fn gather(&mut self, src: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.expect_2d(src, "gather")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(self.shape_err("gather", format!("row {bad} out of {r}")));
        }
        let n = rows.len();
        Ok(self.push(Op::Gather { src, rows }, vec![n, c]))
    }

    pub fn scatter_add(&mut self, src: NodeId, rows: Vec<usize>, out_rows: usize) -> Result<NodeId> {
        let (r, c) = self.expect_2d(src, "scatter_add")?;
        if rows.len() != r {
            return Err(self.shape_err(
                "scatter_add",
                format!("{} indices for {} rows", rows.len(), r),
            ));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= out_rows) {
            return Err(self.shape_err("scatter_add", format!("row {bad} out of {out_rows}")));
        }
        Ok(self.push(
            Op::ScatterAdd {
                src,
                rows,
                out_rows,
            },
            vec![out_rows, c],
        ))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, c) = self.expect_2d(a, "mean_rows")?;
        Ok(self.push(Op::MeanRows(a), vec![1, c]))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, c) = self.expect_2d(a, "sum_rows")?;
        Ok(self.push(Op::SumRows(a), vec![1, c]))
    }

    pub fn repeat_rows(&mut self, a: NodeId, count: usize) -> Result<NodeId> {
        let (r, c) = self.expect_2d(a, "repeat_rows")?;
        if r != 1 {
            return Err(self.shape_err("repeat_rows", format!("expected one row, got {r}")));
        }
        Ok(self.push(Op::RepeatRows { src: a, count }, vec![count, c]))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Tanh(a), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Exp(a), shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Log(a), shape)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Recip(a), shape)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.expect_2d(a, "softmax")?;
        if r != 1 {
            return Err(self.shape_err("softmax", format!("expected one row, got {r}")));
        }
        Ok(self.push(Op::Softmax(a), vec![1, c]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Vec::new())
    }

    pub fn fill(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !self.nodes[a].shape.is_empty() {
            return Err(self.shape_err(
                "fill",
                format!("source must be scalar, got {:?}", self.nodes[a].shape),
            ));
        }
        Ok(self.push(
            Op::Fill {
                src: a,
                shape: shape.to_vec(),
            },
            shape.to_vec(),
        ))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(self.shape_err(
                "dot",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        Ok(self.push(Op::Dot(a, b), Vec::new()))
    }

    /// a + c*b for a constant c, a convenience over the primitive set.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.nodes[b].shape.clone();
        let scale = self.constant(Tensor::filled(&shape, c));
        let scaled = self.mul(b, scale)?;
        self.add(a, scaled)
    }

    /// c*a for a constant c.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.nodes[a].shape.clone();
        let k = self.constant(Tensor::filled(&shape, c));
        self.mul(a, k)
    }

    // ---- evaluation -------------------------------------------------------

    /// Evaluates one node; the tape itself is not modified.
    pub fn evaluate(&self, out: NodeId, bindings: &Bindings) -> Result<Tensor> {
        Ok(self.evaluate_many(&[out], bindings)?.pop().unwrap())
    }

    /// Evaluates several nodes in one sweep over their shared ancestors.
    pub fn evaluate_many(&self, outs: &[NodeId], bindings: &Bindings) -> Result<Vec<Tensor>> {
        let mut ev = Evaluator::new(self, outs);
        ev.check_finite = true;
        ev.run(self, bindings)?;
        Ok(outs.iter().map(|&o| ev.value(o).clone()).collect())
    }

    // ---- differentiation --------------------------------------------------

    /// Appends a symbolic backward pass for the scalar `output` and returns
    /// the adjoint node of each `wrt` node. `wrt` entries may be variables
    /// or intermediate nodes (the adjoint of an interior node is its
    /// upstream sensitivity, which is what input-saliency needs).
    pub fn adjoints(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Adjoints> {
        if !self.nodes[output].shape.is_empty() {
            return Err(Error::NonScalarOutput(self.nodes[output].shape.clone()));
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; output + 1];
        let seed = self.constant(Tensor::scalar(1.0));
        adj[output] = Some(seed);

        let mut inputs = Vec::new();
        for i in (0..=output).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            op.inputs(&mut inputs);
            if inputs.is_empty() {
                continue;
            }
            if !self.nodes[i].differentiable {
                return Err(Error::NonDifferentiable {
                    node: i,
                    op: op.name(),
                });
            }
            match op {
                Op::Var(_) | Op::Const(_) => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g)?;
                    self.accumulate(&mut adj, b, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, b)?;
                    self.accumulate(&mut adj, a, ga)?;
                    let gb = self.mul(g, a)?;
                    self.accumulate(&mut adj, b, gb)?;
                }
                Op::Matmul(a, b) => {
                    let bt = self.transpose(b)?;
                    let ga = self.matmul(g, bt)?;
                    self.accumulate(&mut adj, a, ga)?;
                    let at = self.transpose(a)?;
                    let gb = self.matmul(at, g)?;
                    self.accumulate(&mut adj, b, gb)?;
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Gather { src, rows } => {
                    let out_rows = self.nodes[src].shape[0];
                    let ga = self.scatter_add(g, rows, out_rows)?;
                    self.accumulate(&mut adj, src, ga)?;
                }
                Op::ScatterAdd { src, rows, .. } => {
                    let ga = self.gather(g, rows)?;
                    self.accumulate(&mut adj, src, ga)?;
                }
                Op::MeanRows(a) => {
                    let n = self.nodes[a].shape[0];
                    let scaled = self.scale(g, 1.0 / n as f64)?;
                    let ga = self.repeat_rows(scaled, n)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SumRows(a) => {
                    let n = self.nodes[a].shape[0];
                    let ga = self.repeat_rows(g, n)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::RepeatRows { src, .. } => {
                    let ga = self.sum_rows(g)?;
                    self.accumulate(&mut adj, src, ga)?;
                }
                Op::Tanh(a) => {
                    // d tanh = 1 - y^2, written against the forward node y.
                    let y2 = self.mul(i, i)?;
                    let shape = self.nodes[i].shape.clone();
                    let ones = self.constant(Tensor::filled(&shape, 1.0));
                    let one_minus = self.add_scaled(ones, y2, -1.0)?;
                    let ga = self.mul(g, one_minus)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, i)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Log(a) => {
                    let inv = self.recip(a);
                    let ga = self.mul(g, inv)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Recip(a) => {
                    // d(1/x) = -y^2.
                    let y2 = self.mul(i, i)?;
                    let neg = self.scale(y2, -1.0)?;
                    let ga = self.mul(g, neg)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Softmax(a) => {
                    // g_x = y * (g - <g, y>).
                    let shape = self.nodes[i].shape.clone();
                    let gy = self.dot(g, i)?;
                    let gy_full = self.fill(gy, &shape)?;
                    let centered = self.add_scaled(g, gy_full, -1.0)?;
                    let ga = self.mul(i, centered)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a].shape.clone();
                    let ga = self.fill(g, &shape)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Fill { src, .. } => {
                    let ga = self.sum(g);
                    self.accumulate(&mut adj, src, ga)?;
                }
                Op::Dot(a, b) => {
                    let shape = self.nodes[a].shape.clone();
                    let gf = self.fill(g, &shape)?;
                    let ga = self.mul(gf, b)?;
                    self.accumulate(&mut adj, a, ga)?;
                    let gb = self.mul(gf, a)?;
                    self.accumulate(&mut adj, b, gb)?;
                }
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        let mut missing = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adj.get(w).copied().flatten() {
                Some(g) => {
                    grads.push(g);
                    missing.push(false);
                }
                None => {
                    let shape = self.nodes[w].shape.clone();
                    grads.push(self.constant(Tensor::zeros(&shape)));
                    missing.push(true);
                }
            }
        }
        Ok(Adjoints { grads, missing })
    }

    fn accumulate(
        &mut self,
        adj: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        adj[target] = Some(match adj[target] {
            Some(prev) => self.add(prev, contribution)?,
            None => contribution,
        });
        Ok(())
    }

    /// Reverse-mode gradient of a scalar with respect to named variables,
    /// evaluated under `bindings`. The adjoints stay on the tape, so the
    /// returned values can also be differentiated again via their node ids.
    pub fn gradient(
        &mut self,
        output: NodeId,
        wrt: &[&str],
        bindings: &Bindings,
    ) -> Result<BTreeMap<String, Tensor>> {
        let ids: Vec<NodeId> = wrt
            .iter()
            .map(|name| {
                self.var_node(name)
                    .ok_or_else(|| Error::UnboundVariable((*name).to_string()))
            })
            .collect::<Result<_>>()?;
        let adj = self.adjoints(output, &ids)?;
        let values = self.evaluate_many(&adj.grads, bindings)?;
        Ok(wrt
            .iter()
            .map(|s| s.to_string())
            .zip(values)
            .collect())
    }
}

// ---- evaluator -------------------------------------------------------------

/// Reusable evaluation workspace for one set of output nodes.
///
/// Allocates every needed intermediate once (shapes are static) and then
/// evaluates in place, which matters in the Hessian-column and stochastic
/// estimator loops where the same tape runs thousands of times. A dirty-set
/// can be declared so that re-runs after changing only some variables skip
/// every node that does not depend on them.
pub struct Evaluator {
    order: Vec<NodeId>,
    values: Vec<Tensor>,
    needed: Vec<bool>,
    dirty_order: Vec<NodeId>,
    has_run: bool,
    pub(crate) check_finite: bool,
}

impl Evaluator {
    pub fn new(tape: &Tape, outs: &[NodeId]) -> Self {
        let n = tape.nodes.len();
        let mut needed = vec![false; n];
        let mut stack: Vec<NodeId> = outs.to_vec();
        let mut inputs = Vec::new();
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            tape.nodes[id].op.inputs(&mut inputs);
            stack.extend(inputs.iter().copied());
        }
        let order: Vec<NodeId> = (0..n).filter(|&i| needed[i]).collect();
        let values = (0..n)
            .map(|i| {
                if needed[i] {
                    Tensor::zeros(&tape.nodes[i].shape)
                } else {
                    Tensor::zeros(&[0])
                }
            })
            .collect();
        Evaluator {
            order,
            values,
            needed,
            dirty_order: Vec::new(),
            has_run: false,
            check_finite: false,
        }
    }

    /// Declares the variables that may change between runs; `run_dirty`
    /// then re-evaluates only their downstream nodes.
    pub fn track_dirty(&mut self, tape: &Tape, vars: &[&str]) {
        let n = tape.nodes.len();
        let mut dirty = vec![false; n];
        for name in vars {
            if let Some(id) = tape.var_node(name) {
                dirty[id] = true;
            }
        }
        let mut inputs = Vec::new();
        for id in 0..n {
            if dirty[id] || !self.needed[id] {
                continue;
            }
            tape.nodes[id].op.inputs(&mut inputs);
            if inputs.iter().any(|&i| dirty[i]) {
                dirty[id] = true;
            }
        }
        self.dirty_order = self
            .order
            .iter()
            .copied()
            .filter(|&i| dirty[i])
            .collect();
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    /// Full evaluation of all needed nodes.
    pub fn run(&mut self, tape: &Tape, bindings: &Bindings) -> Result<()> {
        self.run_nodes(tape, bindings, None)
    }

    /// Re-evaluates only nodes downstream of the tracked dirty variables.
    /// Requires one prior full `run`.
    pub fn run_dirty(&mut self, tape: &Tape, bindings: &Bindings) -> Result<()> {
        assert!(self.has_run, "run_dirty before an initial run");
        let order = std::mem::take(&mut self.dirty_order);
        let res = self.run_nodes(tape, bindings, Some(&order));
        self.dirty_order = order;
        res
    }

    fn run_nodes(
        &mut self,
        tape: &Tape,
        bindings: &Bindings,
        subset: Option<&[NodeId]>,
    ) -> Result<()> {
        let order = subset.unwrap_or(&self.order);
        for &id in order {
            let node = &tape.nodes[id];
            // Split borrow: out is disjoint from all inputs (inputs < id).
            let (before, rest) = self.values.split_at_mut(id);
            let out = &mut rest[0];
            eval_op(&node.op, before, bindings, out).map_err(|e| match e {
                Error::Dimension(detail) => Error::Shape {
                    node: id,
                    op: node.op.name(),
                    detail,
                },
                other => other,
            })?;
            if self.check_finite && !out.all_finite() {
                return Err(Error::NonFinite {
                    node: id,
                    op: node.op.name(),
                });
            }
        }
        if subset.is_none() {
            self.has_run = true;
        }
        Ok(())
    }
}

fn eval_op(op: &Op, values: &[Tensor], bindings: &Bindings, out: &mut Tensor) -> Result<()> {
    match op {
        Op::Var(name) => {
            let bound = bindings
                .get(name)
                .ok_or_else(|| Error::UnboundVariable(name.clone()))?;
            if bound.shape() != out.shape() {
                return Err(Error::Dimension(format!(
                    "variable `{}` declared {:?}, bound {:?}",
                    name,
                    out.shape(),
                    bound.shape()
                )));
            }
            out.data_mut().copy_from_slice(bound.data());
        }
        Op::Const(t) => out.data_mut().copy_from_slice(t.data()),
        Op::Add(a, b) => {
            let (a, b) = (&values[*a], &values[*b]);
            for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *o = x + y;
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (&values[*a], &values[*b]);
            for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *o = x * y;
            }
        }
        Op::Matmul(a, b) => {
            let (a, b) = (&values[*a], &values[*b]);
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            let (ad, bd) = (a.data(), b.data());
            let od = out.data_mut();
            od.fill(0.0);
            for i in 0..m {
                for l in 0..k {
                    let av = ad[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[l * n..(l + 1) * n];
                    let orow = &mut od[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let a = &values[*a];
            let (r, c) = (a.rows(), a.cols());
            let ad = a.data();
            let od = out.data_mut();
            for i in 0..r {
                for j in 0..c {
                    od[j * r + i] = ad[i * c + j];
                }
            }
        }
        Op::Gather { src, rows } => {
            let src = &values[*src];
            let c = src.cols();
            let od = out.data_mut();
            for (i, &r) in rows.iter().enumerate() {
                od[i * c..(i + 1) * c].copy_from_slice(src.row_slice(r));
            }
        }
        Op::ScatterAdd { src, rows, .. } => {
            let src = &values[*src];
            let c = src.cols();
            let od = out.data_mut();
            od.fill(0.0);
            for (i, &r) in rows.iter().enumerate() {
                let srow = src.row_slice(i);
                let orow = &mut od[r * c..(r + 1) * c];
                for (o, s) in orow.iter_mut().zip(srow) {
                    *o += s;
                }
            }
        }
        Op::MeanRows(a) => {
            let a = &values[*a];
            let r = a.rows();
            let od = out.data_mut();
            od.fill(0.0);
            for i in 0..r {
                for (o, v) in od.iter_mut().zip(a.row_slice(i)) {
                    *o += v;
                }
            }
            let inv = 1.0 / r as f64;
            for o in od.iter_mut() {
                *o *= inv;
            }
        }
        Op::SumRows(a) => {
            let a = &values[*a];
            let r = a.rows();
            let od = out.data_mut();
            od.fill(0.0);
            for i in 0..r {
                for (o, v) in od.iter_mut().zip(a.row_slice(i)) {
                    *o += v;
                }
            }
        }
        Op::RepeatRows { src, count } => {
            let src = &values[*src];
            let c = src.cols();
            let row = src.row_slice(0);
            let od = out.data_mut();
            for i in 0..*count {
                od[i * c..(i + 1) * c].copy_from_slice(row);
            }
        }
        Op::Tanh(a) => {
            for (o, x) in out.data_mut().iter_mut().zip(values[*a].data()) {
                *o = x.tanh();
            }
        }
        Op::Exp(a) => {
            for (o, x) in out.data_mut().iter_mut().zip(values[*a].data()) {
                *o = x.exp();
            }
        }
        Op::Log(a) => {
            for (o, x) in out.data_mut().iter_mut().zip(values[*a].data()) {
                *o = x.ln();
            }
        }
        Op::Recip(a) => {
            for (o, x) in out.data_mut().iter_mut().zip(values[*a].data()) {
                *o = 1.0 / x;
            }
        }
        Op::Softmax(a) => {
            let a = values[*a].data();
            let od = out.data_mut();
            let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, x) in od.iter_mut().zip(a) {
                *o = (x - max).exp();
                sum += *o;
            }
            let inv = 1.0 / sum;
            for o in od.iter_mut() {
                *o *= inv;
            }
        }
        Op::Sum(a) => {
            out.data_mut()[0] = values[*a].data().iter().sum();
        }
        Op::Fill { src, .. } => {
            let v = values[*src].data()[0];
            out.data_mut().fill(v);
        }
        Op::Dot(a, b) => {
            let (a, b) = (values[*a].data(), values[*b].data());
            out.data_mut()[0] = a.iter().zip(b).map(|(x, y)| x * y).sum();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::*;
    use rand::Rng;

    fn eval_scalar(tape: &Tape, out: NodeId, b: &Bindings) -> f64 {
        tape.evaluate(out, b).unwrap().scalar_value()
    }

    #[test]
    fn square_evaluates_and_differentiates() {
        let mut tape = Tape::new();
        let x = tape.var("x", &[]).unwrap();
        let y = tape.mul(x, x).unwrap();
        let mut b = Bindings::new();
        b.set("x", Tensor::scalar(3.0));
        assert_eq!(eval_scalar(&tape, y, &b), 9.0);
        let grads = tape.gradient(y, &["x"], &b).unwrap();
        assert_eq!(grads["x"].scalar_value(), 6.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        let v = tape.evaluate(s, &Bindings::new()).unwrap();
        assert_eq!(v.data(), &[0.5, 0.5]);
    }

    #[test]
    fn linear_score_gradient_is_the_weight_vector() {
        let mut tape = Tape::new();
        let x = tape.var("x", &[1, 4]).unwrap();
        let w = Tensor::row(vec![0.5, -1.25, 2.0, 0.0]);
        let wc = tape.constant(w.clone());
        let f = tape.dot(wc, x).unwrap();
        let mut b = Bindings::new();
        b.set("x", Tensor::row(vec![1.0, 2.0, 3.0, 4.0]));
        let grads = tape.gradient(f, &["x"], &b).unwrap();
        assert_eq!(grads["x"], w);
    }

    /// Straight-line reimplementation of a two-layer tanh encoder, kept
    /// independent of the tape kernels on purpose.
    fn encoder_by_hand(emb: &[f64], tokens: &[usize], w1: &[f64], w2: &[f64], d: usize, h: usize) -> f64 {
        let mut xbar = vec![0.0; d];
        for &t in tokens {
            for j in 0..d {
                xbar[j] += emb[t * d + j];
            }
        }
        for v in xbar.iter_mut() {
            *v /= tokens.len() as f64;
        }
        let mut hid = vec![0.0; h];
        for k in 0..h {
            let mut acc = 0.0;
            for j in 0..d {
                acc += xbar[j] * w1[j * h + k];
            }
            hid[k] = acc.tanh();
        }
        let mut out = 0.0;
        for k in 0..h {
            out += hid[k] * w2[k];
        }
        out.tanh()
    }

    #[test]
    fn two_layer_forward_matches_straight_line_oracle() {
        let (vocab, d, h) = (6, 3, 4);
        let mut r = rng(11);
        let emb = uniform(&mut r, vocab * d, -1.0, 1.0);
        let w1 = uniform(&mut r, d * h, -1.0, 1.0);
        let w2 = uniform(&mut r, h, -1.0, 1.0);
        let tokens = vec![2usize, 5, 2];

        let mut tape = Tape::new();
        let e = tape.var("emb", &[vocab, d]).unwrap();
        let g = tape.gather(e, tokens.clone()).unwrap();
        let xbar = tape.mean_rows(g).unwrap();
        let w1c = tape.constant(Tensor::new(vec![d, h], w1.clone()).unwrap());
        let pre = tape.matmul(xbar, w1c).unwrap();
        let hid = tape.tanh(pre);
        let w2c = tape.constant(Tensor::new(vec![h, 1], w2.clone()).unwrap());
        let out2 = tape.matmul(hid, w2c).unwrap();
        let scalar = tape.sum(out2);
        let y = tape.tanh(scalar);

        let mut b = Bindings::new();
        b.set("emb", Tensor::new(vec![vocab, d], emb.clone()).unwrap());
        let got = eval_scalar(&tape, y, &b);
        let want = encoder_by_hand(&emb, &tokens, &w1, &w2, d, h);
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }

    /// Random three-layer scalar function used by the finite-difference
    /// oracle checks; exercises every differentiable primitive.
    fn build_three_layer(tape: &mut Tape, vocab: usize, d: usize, h: usize, c: usize, seed: u64) -> NodeId {
        let mut r = rng(seed);
        let e = tape.var("emb", &[vocab, d]).unwrap();
        let w1 = tape.var("w1", &[d, h]).unwrap();
        let b1 = tape.var("b1", &[1, h]).unwrap();
        let w2 = tape.var("w2", &[h, c]).unwrap();
        let tokens: Vec<usize> = (0..5).map(|_| r.gen_range(0..vocab)).collect();
        let g = tape.gather(e, tokens).unwrap();
        let xbar = tape.mean_rows(g).unwrap();
        let pre = tape.matmul(xbar, w1).unwrap();
        let pre = tape.add(pre, b1).unwrap();
        let hid = tape.tanh(pre);
        let logits = tape.matmul(hid, w2).unwrap();
        let probs = tape.softmax(logits).unwrap();
        let hot = tape.constant(Tensor::one_hot(c, r.gen_range(0..c)));
        let p = tape.dot(probs, hot).unwrap();
        let lp = tape.log(p);
        let neg = tape.scale(lp, -1.0).unwrap();
        // add a quadratic term so second derivatives are nontrivial everywhere
        let w2dot = tape.dot(w2, w2).unwrap();
        tape.add_scaled(neg, w2dot, 0.5).unwrap()
    }

    fn pack(vals: &BTreeMap<String, Tensor>, names: &[&str]) -> Vec<f64> {
        let mut out = Vec::new();
        for n in names {
            out.extend_from_slice(vals[*n].data());
        }
        out
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let (vocab, d, h, c) = (5, 3, 4, 3);
        let names = ["emb", "w1", "b1", "w2"];
        let shapes: &[&[usize]] = &[&[vocab, d], &[d, h], &[1, h], &[h, c]];
        for seed in 0..5u64 {
            let mut tape = Tape::new();
            let out = build_three_layer(&mut tape, vocab, d, h, c, seed);
            let mut r = rng(100 + seed);
            let mut flat = Vec::new();
            let mut bindings = Bindings::new();
            for (name, shape) in names.iter().zip(shapes) {
                let vals = uniform(&mut r, shape.iter().product(), -0.5, 0.5);
                flat.extend_from_slice(&vals);
                bindings.set(*name, Tensor::new(shape.to_vec(), vals).unwrap());
            }
            let analytic = {
                let grads = tape.gradient(out, &names, &bindings).unwrap();
                pack(&grads, &names)
            };
            let mut f = |x: &[f64]| {
                let mut b = Bindings::new();
                let mut at = 0;
                for (name, shape) in names.iter().zip(shapes) {
                    let len: usize = shape.iter().product();
                    b.set(*name, Tensor::new(shape.to_vec(), x[at..at + len].to_vec()).unwrap());
                    at += len;
                }
                eval_scalar(&tape, out, &b)
            };
            let numeric = fd_gradient(&mut f, &flat, 1e-4);
            let err = max_rel_err(&analytic, &numeric, 1e-9);
            assert!(err < 1e-6, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn gradient_is_linear_in_the_function() {
        // gradient(alpha*f + beta*g) == alpha*gradient(f) + beta*gradient(g)
        let mut tape = Tape::new();
        let x = tape.var("x", &[1, 3]).unwrap();
        let f = {
            let sq = tape.mul(x, x).unwrap();
            tape.sum(sq)
        };
        let g = {
            let t = tape.tanh(x);
            let c = tape.constant(Tensor::row(vec![1.0, -2.0, 0.5]));
            tape.dot(t, c).unwrap()
        };
        let (alpha, beta) = (1.75, -0.6);
        let af = tape.scale(f, alpha).unwrap();
        let combo = tape.add_scaled(af, g, beta).unwrap();

        let mut b = Bindings::new();
        b.set("x", Tensor::row(vec![0.3, -0.8, 1.1]));
        let gf = tape.gradient(f, &["x"], &b).unwrap();
        let gg = tape.gradient(g, &["x"], &b).unwrap();
        let gc = tape.gradient(combo, &["x"], &b).unwrap();
        for i in 0..3 {
            let want = alpha * gf["x"].data()[i] + beta * gg["x"].data()[i];
            let got = gc["x"].data()[i];
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn evaluation_is_deterministic_bit_for_bit() {
        let mut tape = Tape::new();
        let out = build_three_layer(&mut tape, 5, 3, 4, 2, 7);
        let grads = {
            let wrt = [tape.var_node("emb").unwrap(), tape.var_node("w1").unwrap()];
            tape.adjoints(out, &wrt).unwrap().grads
        };
        let mut r = rng(9);
        let mut b = Bindings::new();
        b.set("emb", Tensor::new(vec![5, 3], uniform(&mut r, 15, -0.5, 0.5)).unwrap());
        b.set("w1", Tensor::new(vec![3, 4], uniform(&mut r, 12, -0.5, 0.5)).unwrap());
        b.set("b1", Tensor::new(vec![1, 4], uniform(&mut r, 4, -0.5, 0.5)).unwrap());
        b.set("w2", Tensor::new(vec![4, 2], uniform(&mut r, 8, -0.5, 0.5)).unwrap());
        let mut outs = vec![out];
        outs.extend_from_slice(&grads);
        let first = tape.evaluate_many(&outs, &b).unwrap();
        let second = tape.evaluate_many(&outs, &b).unwrap();
        for (a, bb) in first.iter().zip(&second) {
            assert_eq!(a.data(), bb.data());
        }
    }

    #[test]
    fn unbound_variable_is_reported_by_name() {
        let mut tape = Tape::new();
        let x = tape.var("x", &[]).unwrap();
        let y = tape.mul(x, x).unwrap();
        match tape.evaluate(y, &Bindings::new()) {
            Err(Error::UnboundVariable(name)) => assert_eq!(name, "x"),
            other => panic!("expected unbound-variable error, got {other:?}"),
        }
    }

    #[test]
    fn binding_shape_mismatch_names_the_node() {
        let mut tape = Tape::new();
        let x = tape.var("x", &[1, 3]).unwrap();
        let y = tape.sum(x);
        let mut b = Bindings::new();
        b.set("x", Tensor::row(vec![1.0, 2.0]));
        match tape.evaluate(y, &b) {
            Err(Error::Shape { node, .. }) => assert_eq!(node, x),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn construction_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.var("a", &[2, 3]).unwrap();
        let b = tape.var("b", &[3, 3]).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        assert!(tape.matmul(a, b).is_ok());
        assert!(matches!(tape.matmul(b, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_scalar_gradient_target_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.var("x", &[1, 2]).unwrap();
        let y = tape.tanh(x);
        assert!(matches!(
            tape.adjoints(y, &[x]),
            Err(Error::NonScalarOutput(_))
        ));
    }

    #[test]
    fn non_differentiable_node_on_path_is_reported() {
        let mut tape = Tape::new();
        let x = tape.var("x", &[]).unwrap();
        let t = tape.tanh(x);
        let y = tape.mul(t, t).unwrap();
        tape.mark_non_differentiable(t);
        match tape.adjoints(y, &[x]) {
            Err(Error::NonDifferentiable { op, .. }) => assert_eq!(op, "tanh"),
            other => panic!("expected non-differentiable error, got {other:?}"),
        }
    }

    #[test]
    fn adjoint_of_intermediate_node_is_available() {
        // y = sum(tanh(g)) where g = gather(emb); the adjoint of g is the
        // per-row input sensitivity that saliency consumes.
        let mut tape = Tape::new();
        let e = tape.var("emb", &[4, 2]).unwrap();
        let g = tape.gather(e, vec![1, 3]).unwrap();
        let t = tape.tanh(g);
        let y = tape.sum(t);
        let adj = tape.adjoints(y, &[g]).unwrap();
        assert!(!adj.missing[0]);
        let mut b = Bindings::new();
        b.set(
            "emb",
            Tensor::new(vec![4, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap(),
        );
        let got = tape.evaluate(adj.grads[0], &b).unwrap();
        // d sum(tanh(x)) / dx = 1 - tanh(x)^2 elementwise at the gathered rows
        for (i, &row) in [1usize, 3].iter().enumerate() {
            for j in 0..2 {
                let x: f64 = 0.1 + 0.1 * (row * 2 + j) as f64;
                let want = 1.0 - x.tanh().powi(2);
                let gotv = got.data()[i * 2 + j];
                assert!((gotv - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dirty_tracking_matches_full_reevaluation() {
        let mut tape = Tape::new();
        let x = tape.var("x", &[1, 3]).unwrap();
        let w = tape.var("w", &[3, 2]).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let t = tape.tanh(y);
        let out = tape.sum(t);

        let mut ev = Evaluator::new(&tape, &[out]);
        ev.track_dirty(&tape, &["w"]);
        let mut b = Bindings::new();
        b.set("x", Tensor::row(vec![0.1, 0.2, 0.3]));
        b.set("w", Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap());
        ev.run(&tape, &b).unwrap();
        let before = ev.value(out).scalar_value();

        b.set("w", Tensor::new(vec![3, 2], vec![0.5; 6]).unwrap());
        ev.run_dirty(&tape, &b).unwrap();
        let fast = ev.value(out).scalar_value();
        let slow = tape.evaluate(out, &b).unwrap().scalar_value();
        assert_eq!(fast, slow);
        assert_ne!(fast, before);
    }

    #[test]
    fn second_gradient_through_backward_nodes() {
        // f(x) = x^4 via two squarings: f'' = 12 x^2, f''' path exercises
        // gradient-of-gradient on nodes created by the first backward pass.
        let mut tape = Tape::new();
        let x = tape.var("x", &[]).unwrap();
        let x2 = tape.mul(x, x).unwrap();
        let f = tape.mul(x2, x2).unwrap();
        let first = tape.adjoints(f, &[x]).unwrap();
        let second = tape.adjoints(first.grads[0], &[x]).unwrap();
        let mut b = Bindings::new();
        b.set("x", Tensor::scalar(1.5));
        let fpp = tape.evaluate(second.grads[0], &b).unwrap().scalar_value();
        assert!((fpp - 12.0 * 1.5 * 1.5).abs() < 1e-12);
    }
}
