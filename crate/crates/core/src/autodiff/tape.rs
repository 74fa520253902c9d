use std::fmt;
use std::str::FromStr;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable operations.
///
/// Every variant has a forward rule, a backward rule and a finite-difference
/// test in this module. No broadcasting happens anywhere except for
/// `AddRowBias`, which adds a length-`H` vector to each row of a `B x H` matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    AddRowBias,
    Scale(f64),
    AddConst(f64),
    Relu,
    Log,
    Exp,
    Sqrt,
    Square,
    PowConst(f64),
    SoftmaxRows,
    LogSoftmaxRows,
    ReduceMean,
    ReduceSum,
    /// `B x K` matrix to length-`B` vector of row sums.
    RowSums,
    /// `B x D` matrix to length-`D` vector of column means.
    ColMeans,
    Transpose,
    /// Square matrix to the vector of its diagonal.
    Diag,
    ConcatRows,
    SliceRows { start: usize, end: usize },
    FrobeniusSq,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::AddRowBias => "add_row_bias",
            Primitive::Scale(_) => "scale",
            Primitive::AddConst(_) => "add_const",
            Primitive::Relu => "relu",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Sqrt => "sqrt",
            Primitive::Square => "square",
            Primitive::PowConst(_) => "pow_const",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::LogSoftmaxRows => "log_softmax_rows",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::ReduceSum => "reduce_sum",
            Primitive::RowSums => "row_sums",
            Primitive::ColMeans => "col_means",
            Primitive::Transpose => "transpose",
            Primitive::Diag => "diag",
            Primitive::ConcatRows => "concat_rows",
            Primitive::SliceRows { .. } => "slice_rows",
            Primitive::FrobeniusSq => "frobenius_sq",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::AddRowBias
            | Primitive::ConcatRows => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::Scale(c) | Primitive::AddConst(c) | Primitive::PowConst(c) => {
                write!(f, "{}:{c}", self.name())
            }
            Primitive::SliceRows { start, end } => write!(f, "slice_rows:{start}:{end}"),
            _ => f.write_str(self.name()),
        }
    }
}

/// Parses `name` or `name:arg[:arg]`, e.g. `relu`, `scale:0.5`, `slice_rows:0:4`.
impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let unknown = || Error::UnknownPrimitive(s.to_string());
        let real = |i: usize| -> Result<f64> {
            args.get(i)
                .and_then(|a| a.parse::<f64>().ok())
                .ok_or_else(unknown)
        };
        let index = |i: usize| -> Result<usize> {
            args.get(i)
                .and_then(|a| a.parse::<usize>().ok())
                .ok_or_else(unknown)
        };
        let prim = match name {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "add_row_bias" => Primitive::AddRowBias,
            "scale" => Primitive::Scale(real(0)?),
            "add_const" => Primitive::AddConst(real(0)?),
            "relu" => Primitive::Relu,
            "log" => Primitive::Log,
            "exp" => Primitive::Exp,
            "sqrt" => Primitive::Sqrt,
            "square" => Primitive::Square,
            "pow_const" => Primitive::PowConst(real(0)?),
            "softmax_rows" => Primitive::SoftmaxRows,
            "log_softmax_rows" => Primitive::LogSoftmaxRows,
            "reduce_mean" => Primitive::ReduceMean,
            "reduce_sum" => Primitive::ReduceSum,
            "row_sums" => Primitive::RowSums,
            "col_means" => Primitive::ColMeans,
            "transpose" => Primitive::Transpose,
            "diag" => Primitive::Diag,
            "concat_rows" => Primitive::ConcatRows,
            "slice_rows" => Primitive::SliceRows {
                start: index(0)?,
                end: index(1)?,
            },
            "frobenius_sq" => Primitive::FrobeniusSq,
            _ => return Err(unknown()),
        };
        let expected_args = match prim {
            Primitive::Scale(_) | Primitive::AddConst(_) | Primitive::PowConst(_) => 1,
            Primitive::SliceRows { .. } => 2,
            _ => 0,
        };
        if args.len() != expected_args {
            return Err(unknown());
        }
        Ok(prim)
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Option<Primitive>,
    parents: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Linear record of a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every parent index is smaller
/// than its child's. A tape is single-owner; build a fresh one per step.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf registered with [`Tape::leaf`]. Leaves that the
    /// loss does not depend on get a zero tensor of the leaf's shape.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
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

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(None, vec![], value, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(None, vec![], value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Primitive and parents of a node; `None` for inputs.
    pub fn op_of(&self, id: NodeId) -> Option<(Primitive, &[NodeId])> {
        let node = &self.nodes[id.0];
        node.op.map(|op| (op, node.parents.as_slice()))
    }

    fn push(&mut self, op: Option<Primitive>, parents: Vec<NodeId>, value: Tensor, grad: bool) -> NodeId {
        let requires_grad = grad || parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    /// Applies a primitive to already-recorded nodes and records the result.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != op.arity() {
            return Err(Error::shape(
                op.name(),
                format!("expected {} inputs, got {}", op.arity(), inputs.len()),
            ));
        }
        for &id in inputs {
            self.check(id)?;
        }
        let args: Vec<&Tensor> = inputs.iter().map(|&id| &self.nodes[id.0].value).collect();
        let (shape, values) = forward(op, &args)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        let value = Tensor::from_parts_unchecked(shape, values);
        Ok(self.push(Some(op), inputs.to_vec(), value, false))
    }

    /// Applies a primitive given by name (see the `FromStr` impl of [`Primitive`]).
    pub fn apply_named(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        let op: Primitive = name.parse()?;
        self.apply(op, inputs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Primitive::AddRowBias, &[x, bias])
    }
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(c), &[x])
    }
    pub fn add_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::AddConst(c), &[x])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[x])
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[x])
    }
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sqrt, &[x])
    }
    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Square, &[x])
    }
    pub fn pow_const(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        self.apply(Primitive::PowConst(p), &[x])
    }
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SoftmaxRows, &[x])
    }
    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::LogSoftmaxRows, &[x])
    }
    pub fn reduce_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ReduceMean, &[x])
    }
    pub fn reduce_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ReduceSum, &[x])
    }
    pub fn row_sums(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowSums, &[x])
    }
    pub fn col_means(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ColMeans, &[x])
    }
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[x])
    }
    pub fn diag(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Diag, &[x])
    }
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ConcatRows, &[a, b])
    }
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Primitive::SliceRows { start, end }, &[x])
    }
    pub fn frobenius_sq(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::FrobeniusSq, &[x])
    }

    /// Reverse pass from a scalar node. Each recorded node is visited once, in
    /// reverse order; contributions to a node used more than once are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        self.check(loss)?;
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let args: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let wanted: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward_rule(op, &args, &node.value, &upstream, &wanted);
            for ((parent, wanted), contribution) in node.parents.iter().zip(wanted).zip(parent_grads) {
                if !wanted {
                    continue;
                }
                let Some(contribution) = contribution else { continue };
                if contribution.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: op.name(),
                        node: i,
                    });
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if node.op.is_none() && node.requires_grad {
                    let shape = node.value.shape().to_vec();
                    let values = grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor::from_parts_unchecked(shape, values))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn same_shape(op: Primitive, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op.name(),
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn require_matrix(op: Primitive, a: &Tensor) -> Result<(usize, usize)> {
    match a.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op.name(), format!("expected a matrix, got {s:?}"))),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise log-softmax with the row max subtracted first.
pub(crate) fn log_softmax_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

pub(crate) fn softmax_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[i * cols..(i + 1) * cols];
        let mut total = 0.0;
        for (o, v) in o.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn forward(op: Primitive, args: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    let a = args[0];
    let unary = |f: &dyn Fn(f64) -> f64| (a.shape().to_vec(), a.values().iter().map(|&v| f(v)).collect());
    Ok(match op {
        Primitive::MatMul => {
            let b = args[1];
            let (m, k) = require_matrix(op, a)?;
            let (k2, n) = require_matrix(op, b)?;
            if k != k2 {
                return Err(Error::shape(
                    op.name(),
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            (vec![m, n], matmul_raw(a.values(), b.values(), m, k, n))
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let b = args[1];
            same_shape(op, a, b)?;
            let f: fn(f64, f64) -> f64 = match op {
                Primitive::Add => |x, y| x + y,
                Primitive::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            (
                a.shape().to_vec(),
                a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect(),
            )
        }
        Primitive::AddRowBias => {
            let bias = args[1];
            let (rows, cols) = require_matrix(op, a)?;
            if bias.shape() != [cols] {
                return Err(Error::shape(
                    op.name(),
                    format!("bias {:?} for matrix {:?}", bias.shape(), a.shape()),
                ));
            }
            let mut out = a.values().to_vec();
            for i in 0..rows {
                out[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .zip(bias.values())
                    .for_each(|(o, b)| *o += b);
            }
            (vec![rows, cols], out)
        }
        Primitive::Scale(c) => unary(&|v| c * v),
        Primitive::AddConst(c) => unary(&|v| v + c),
        Primitive::Relu => unary(&|v| if v > 0.0 { v } else { 0.0 }),
        Primitive::Log => unary(&f64::ln),
        Primitive::Exp => unary(&f64::exp),
        Primitive::Sqrt => unary(&f64::sqrt),
        Primitive::Square => unary(&|v| v * v),
        Primitive::PowConst(p) => unary(&|v| v.powf(p)),
        Primitive::SoftmaxRows | Primitive::LogSoftmaxRows => {
            let (rows, cols) = require_matrix(op, a)?;
            let values = if op == Primitive::SoftmaxRows {
                softmax_raw(a.values(), rows, cols)
            } else {
                log_softmax_raw(a.values(), rows, cols)
            };
            (vec![rows, cols], values)
        }
        Primitive::ReduceMean => (vec![1], vec![a.sum() / a.numel() as f64]),
        Primitive::ReduceSum => (vec![1], vec![a.sum()]),
        Primitive::RowSums => {
            let (rows, cols) = require_matrix(op, a)?;
            (
                vec![rows],
                (0..rows)
                    .map(|i| a.values()[i * cols..(i + 1) * cols].iter().sum())
                    .collect(),
            )
        }
        Primitive::ColMeans => {
            let (rows, cols) = require_matrix(op, a)?;
            let mut out = vec![0.0; cols];
            for i in 0..rows {
                out.iter_mut()
                    .zip(&a.values()[i * cols..(i + 1) * cols])
                    .for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= rows as f64);
            (vec![cols], out)
        }
        Primitive::Transpose => {
            let (rows, cols) = require_matrix(op, a)?;
            (vec![cols, rows], transpose_raw(a.values(), rows, cols))
        }
        Primitive::Diag => {
            let (rows, cols) = require_matrix(op, a)?;
            if rows != cols {
                return Err(Error::shape(op.name(), format!("non-square {:?}", a.shape())));
            }
            (vec![rows], (0..rows).map(|i| a.values()[i * cols + i]).collect())
        }
        Primitive::ConcatRows => {
            let b = args[1];
            let (ra, ca) = require_matrix(op, a)?;
            let (rb, cb) = require_matrix(op, b)?;
            if ca != cb {
                return Err(Error::shape(
                    op.name(),
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = a.values().to_vec();
            out.extend_from_slice(b.values());
            (vec![ra + rb, ca], out)
        }
        Primitive::SliceRows { start, end } => {
            let t = a.slice_rows(start, end)?;
            (t.shape().to_vec(), t.into_values())
        }
        Primitive::FrobeniusSq => (vec![1], vec![a.squared_norm()]),
    })
}

/// Vector-Jacobian products for each parent. `wanted[i] == false` lets a rule
/// skip work for parents that never need a gradient.
fn backward_rule(
    op: Primitive,
    args: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    wanted: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let a = args[0];
    let av = a.values();
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some((0..g.len()).map(f).collect())]
    };
    match op {
        Primitive::MatMul => {
            let b = args[1];
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let da = wanted[0].then(|| {
                let bt = transpose_raw(b.values(), k, n);
                matmul_raw(g, &bt, m, n, k)
            });
            let db = wanted[1].then(|| {
                let at = transpose_raw(av, m, k);
                matmul_raw(&at, g, k, m, n)
            });
            vec![da, db]
        }
        Primitive::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Primitive::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        Primitive::Mul => {
            let bv = args[1].values();
            vec![
                wanted[0].then(|| g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                wanted[1].then(|| g.iter().zip(av).map(|(g, a)| g * a).collect()),
            ]
        }
        Primitive::AddRowBias => {
            let cols = a.shape()[1];
            let db = wanted[1].then(|| {
                let mut db = vec![0.0; cols];
                for row in g.chunks(cols) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                db
            });
            vec![wanted[0].then(|| g.to_vec()), db]
        }
        Primitive::Scale(c) => elementwise(&|i| c * g[i]),
        Primitive::AddConst(_) => vec![Some(g.to_vec())],
        Primitive::Relu => elementwise(&|i| if av[i] > 0.0 { g[i] } else { 0.0 }),
        Primitive::Log => elementwise(&|i| g[i] / av[i]),
        Primitive::Exp => elementwise(&|i| g[i] * out.values()[i]),
        // A zero upstream gradient stays zero even where sqrt is at 0.
        Primitive::Sqrt => elementwise(&|i| if g[i] == 0.0 { 0.0 } else { g[i] / (2.0 * out.values()[i]) }),
        Primitive::Square => elementwise(&|i| 2.0 * av[i] * g[i]),
        Primitive::PowConst(p) => elementwise(&|i| {
            // d/dx x^p at x = 0 is taken as 0 unless p == 1.
            let d = if p == 1.0 {
                1.0
            } else if av[i] == 0.0 || p == 0.0 {
                0.0
            } else {
                p * av[i].powf(p - 1.0)
            };
            g[i] * d
        }),
        Primitive::SoftmaxRows => {
            let cols = a.shape()[1];
            let y = out.values();
            let mut dx = vec![0.0; g.len()];
            for ((dx, y), g) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                for j in 0..cols {
                    dx[j] = y[j] * (g[j] - dot);
                }
            }
            vec![Some(dx)]
        }
        Primitive::LogSoftmaxRows => {
            let cols = a.shape()[1];
            let mut dx = vec![0.0; g.len()];
            for ((dx, y), g) in dx
                .chunks_mut(cols)
                .zip(out.values().chunks(cols))
                .zip(g.chunks(cols))
            {
                let total: f64 = g.iter().sum();
                for j in 0..cols {
                    dx[j] = g[j] - y[j].exp() * total;
                }
            }
            vec![Some(dx)]
        }
        Primitive::ReduceMean => vec![Some(vec![g[0] / av.len() as f64; av.len()])],
        Primitive::ReduceSum => vec![Some(vec![g[0]; av.len()])],
        Primitive::RowSums => {
            let cols = a.shape()[1];
            vec![Some((0..av.len()).map(|i| g[i / cols]).collect())]
        }
        Primitive::ColMeans => {
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            vec![Some((0..av.len()).map(|i| g[i % cols] / rows as f64).collect())]
        }
        Primitive::Transpose => {
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            vec![Some(transpose_raw(g, cols, rows))]
        }
        Primitive::Diag => {
            let n = a.shape()[0];
            let mut dx = vec![0.0; n * n];
            for i in 0..n {
                dx[i * n + i] = g[i];
            }
            vec![Some(dx)]
        }
        Primitive::ConcatRows => {
            let split = av.len();
            vec![
                wanted[0].then(|| g[..split].to_vec()),
                wanted[1].then(|| g[split..].to_vec()),
            ]
        }
        Primitive::SliceRows { start, .. } => {
            let cols = a.shape()[1];
            let mut dx = vec![0.0; av.len()];
            dx[start * cols..start * cols + g.len()].copy_from_slice(g);
            vec![Some(dx)]
        }
        Primitive::FrobeniusSq => elementwise_len(av.len(), |i| 2.0 * av[i] * g[0]),
    }
}

fn elementwise_len(n: usize, f: impl Fn(usize) -> f64) -> Vec<Option<Vec<f64>>> {
    vec![Some((0..n).map(f).collect())]
}
