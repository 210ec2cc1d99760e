use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul, matmul_nt, matmul_tn, transpose, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    DivScalar(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId, f64),
    Gather(NodeId, Vec<usize>),
    RowNorms(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::SubRow(..) => "sub_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::DivScalar(..) => "div_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNormRows(..) => "layer_norm",
            Op::Gather(..) => "gather",
            Op::RowNorms(..) => "row_norms",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Const(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SubRow(a, b)
            | Op::MulRow(a, b)
            | Op::DivScalar(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::Slice { x, .. } => vec![*x],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a, _)
            | Op::Gather(a, _)
            | Op::RowNorms(a) => vec![*a],
        }
    }
}

/// A recorded computation graph. Nodes are appended in topological order,
/// so the node list itself is the evaluation schedule.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Op>,
}

macro_rules! binary {
    ($(#[$m:meta])* $name:ident, $variant:ident) => {
        $(#[$m])*
        pub fn $name(&mut self, a: NodeId, b: NodeId) -> NodeId {
            self.push(Op::$variant(a, b))
        }
    };
}

macro_rules! unary {
    ($(#[$m:meta])* $name:ident, $variant:ident) => {
        $(#[$m])*
        pub fn $name(&mut self, a: NodeId) -> NodeId {
            self.push(Op::$variant(a))
        }
    };
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether some input node reads `name`.
    pub fn has_input(&self, name: &str) -> bool {
        self.nodes.iter().any(|op| matches!(op, Op::Input(n) if n == name))
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.inputs().iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    /// Placeholder filled from the [`InputSource`] at forward time.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    binary!(add, Add);
    binary!(sub, Sub);
    binary!(mul, Mul);
    binary!(
        /// `a + row`, broadcasting a `1 x m` row over every row of `a`.
        add_row,
        AddRow
    );
    binary!(sub_row, SubRow);
    binary!(mul_row, MulRow);
    binary!(
        /// `a / s` for a one-element `s`.
        div_scalar,
        DivScalar
    );
    binary!(matmul, MatMul);
    unary!(transpose, Transpose);
    unary!(sum, Sum);
    unary!(mean, Mean);
    unary!(exp, Exp);
    unary!(log, Log);
    unary!(sqrt, Sqrt);
    unary!(square, Square);
    unary!(relu, Relu);
    unary!(gelu, Gelu);
    unary!(softmax_rows, SoftmaxRows);
    unary!(
        /// Euclidean norm of every row, `n x k -> n x 1`. The gradient of a
        /// zero row is defined as zero.
        row_norms,
        RowNorms
    );

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice {
            x,
            axis,
            start,
            len,
        })
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNormRows(a, eps))
    }

    /// Row lookup into a `V x e` table.
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::Gather(table, indices))
    }
}

/// Where [`forward`] finds the tensors for `input` placeholders.
pub trait InputSource {
    fn input(&self, name: &str) -> Option<&Tensor>;
}

impl InputSource for HashMap<String, Tensor> {
    fn input(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl InputSource for BTreeMap<String, Tensor> {
    fn input(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl InputSource for [(&str, Tensor)] {
    fn input(&self, name: &str) -> Option<&Tensor> {
        self.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

impl<const N: usize> InputSource for [(&str, Tensor); N] {
    fn input(&self, name: &str) -> Option<&Tensor> {
        self.as_slice().input(name)
    }
}

impl<A: InputSource + ?Sized, B: InputSource + ?Sized> InputSource for (&A, &B) {
    fn input(&self, name: &str) -> Option<&Tensor> {
        self.0.input(name).or_else(|| self.1.input(name))
    }
}

/// Node values computed by [`forward`].
#[derive(Clone, Debug)]
pub struct Values {
    values: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }
}

/// Gradients of one output with respect to named inputs.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    gelu_with_tanh(x).0
}

/// `gelu(x)` and the tanh it was built from, which the derivative reuses.
pub(crate) fn gelu_with_tanh(x: f64) -> (f64, f64) {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    (0.5 * x * (1.0 + t), t)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    gelu_grad_with_tanh(x, gelu_with_tanh(x).1)
}

pub(crate) fn gelu_grad_with_tanh(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn col_sums(g: &Tensor) -> Tensor {
    let (n, m) = (g.rows(), g.cols());
    let mut out = vec![0.0; m];
    for r in 0..n {
        for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![1, m], out)
}

fn broadcast_row(
    op: &'static str,
    a: &Tensor,
    row: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (n, m) = require_matrix(op, a)?;
    if row.shape() != [1, m] {
        return Err(Error::shape(
            op,
            format!("row {:?} does not broadcast over {:?}", row.shape(), a.shape()),
        ));
    }
    let r = row.data();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        out.extend(a.row_slice(i).iter().zip(r).map(|(&x, &y)| f(x, y)));
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn eval_op(op: &Op, values: &[Tensor], inputs: &(impl InputSource + ?Sized)) -> Result<Tensor> {
    let v = |id: NodeId| &values[id];
    let out = match op {
        Op::Input(name) => inputs
            .input(name)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("missing tape input `{name}`")))?,
        Op::Const(t) => t.clone(),
        Op::Add(a, b) => {
            same_shape("add", v(*a), v(*b))?;
            v(*a).zip(v(*b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape("sub", v(*a), v(*b))?;
            v(*a).zip(v(*b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape("mul", v(*a), v(*b))?;
            v(*a).zip(v(*b), |x, y| x * y)
        }
        Op::AddRow(a, r) => broadcast_row("add_row", v(*a), v(*r), |x, y| x + y)?,
        Op::SubRow(a, r) => broadcast_row("sub_row", v(*a), v(*r), |x, y| x - y)?,
        Op::MulRow(a, r) => broadcast_row("mul_row", v(*a), v(*r), |x, y| x * y)?,
        Op::Scale(a, c) => v(*a).map(|x| x * c),
        Op::DivScalar(a, s) => {
            if !v(*s).is_scalar() {
                return Err(Error::shape("div_scalar", "divisor is not a scalar"));
            }
            let d = v(*s).item();
            v(*a).map(|x| x / d)
        }
        Op::MatMul(a, b) => {
            let (n, k) = require_matrix("matmul", v(*a))?;
            let (k2, m) = require_matrix("matmul", v(*b))?;
            if k != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", v(*a).shape(), v(*b).shape()),
                ));
            }
            Tensor::from_parts(vec![n, m], matmul(v(*a).data(), v(*b).data(), n, k, m))
        }
        Op::Transpose(a) => {
            let (n, m) = require_matrix("transpose", v(*a))?;
            Tensor::from_parts(vec![m, n], transpose(v(*a).data(), n, m))
        }
        Op::Concat(parts, axis) => concat(parts.iter().map(|&p| v(p)), *axis)?,
        Op::Slice {
            x,
            axis,
            start,
            len,
        } => {
            let (n, m) = require_matrix("slice", v(*x))?;
            let t = v(*x);
            match axis {
                0 => {
                    if start + len > n {
                        return Err(Error::shape("slice", format!("rows {start}+{len} > {n}")));
                    }
                    Tensor::from_parts(
                        vec![*len, m],
                        t.data()[start * m..(start + len) * m].to_vec(),
                    )
                }
                1 => {
                    if start + len > m {
                        return Err(Error::shape("slice", format!("cols {start}+{len} > {m}")));
                    }
                    let mut out = Vec::with_capacity(n * len);
                    for r in 0..n {
                        out.extend_from_slice(&t.row_slice(r)[*start..start + len]);
                    }
                    Tensor::from_parts(vec![n, *len], out)
                }
                _ => return Err(Error::shape("slice", format!("axis {axis}"))),
            }
        }
        Op::Sum(a) => Tensor::scalar(v(*a).data().iter().sum()),
        Op::Mean(a) => {
            let t = v(*a);
            if t.is_empty() {
                return Err(Error::shape("mean", "empty tensor"));
            }
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        }
        Op::Exp(a) => v(*a).map(f64::exp),
        Op::Log(a) => v(*a).map(f64::ln),
        Op::Sqrt(a) => v(*a).map(f64::sqrt),
        Op::Square(a) => v(*a).map(|x| x * x),
        Op::Relu(a) => v(*a).map(|x| x.max(0.0)),
        Op::Gelu(a) => v(*a).map(gelu),
        Op::SoftmaxRows(a) => {
            let (n, m) = require_matrix("softmax", v(*a))?;
            let mut out = Vec::with_capacity(n * m);
            for r in 0..n {
                let row = v(*a).row_slice(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                out.extend(row.iter().map(|x| (x - max).exp()));
                let z: f64 = out[start..].iter().sum();
                for e in &mut out[start..] {
                    *e /= z;
                }
            }
            Tensor::from_parts(vec![n, m], out)
        }
        Op::LayerNormRows(a, eps) => {
            let (n, m) = require_matrix("layer_norm", v(*a))?;
            let mut out = Vec::with_capacity(n * m);
            for r in 0..n {
                let row = v(*a).row_slice(r);
                let (mean, inv) = layer_norm_stats(row, *eps);
                out.extend(row.iter().map(|x| (x - mean) * inv));
            }
            Tensor::from_parts(vec![n, m], out)
        }
        Op::Gather(table, idx) => {
            let (rows, e) = require_matrix("gather", v(*table))?;
            let mut out = Vec::with_capacity(idx.len() * e);
            for &i in idx {
                if i >= rows {
                    return Err(Error::shape("gather", format!("index {i} >= {rows}")));
                }
                out.extend_from_slice(v(*table).row_slice(i));
            }
            Tensor::from_parts(vec![idx.len(), e], out)
        }
        Op::RowNorms(a) => {
            let (n, _) = require_matrix("row_norms", v(*a))?;
            let out = (0..n)
                .map(|r| v(*a).row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            Tensor::from_parts(vec![n, 1], out)
        }
    };
    Ok(out)
}

fn concat<'a>(parts: impl Iterator<Item = &'a Tensor>, axis: usize) -> Result<Tensor> {
    let parts: Vec<&Tensor> = parts.collect();
    if parts.is_empty() {
        return Err(Error::shape("concat", "no parts"));
    }
    for p in &parts {
        require_matrix("concat", p)?;
    }
    match axis {
        0 => {
            let m = parts[0].cols();
            if parts.iter().any(|p| p.cols() != m) {
                return Err(Error::shape("concat", "column counts differ"));
            }
            let n: usize = parts.iter().map(|p| p.rows()).sum();
            let mut out = Vec::with_capacity(n * m);
            for p in &parts {
                out.extend_from_slice(p.data());
            }
            Ok(Tensor::from_parts(vec![n, m], out))
        }
        1 => {
            let n = parts[0].rows();
            if parts.iter().any(|p| p.rows() != n) {
                return Err(Error::shape("concat", "row counts differ"));
            }
            let m: usize = parts.iter().map(|p| p.cols()).sum();
            let mut out = Vec::with_capacity(n * m);
            for r in 0..n {
                for p in &parts {
                    out.extend_from_slice(p.row_slice(r));
                }
            }
            Ok(Tensor::from_parts(vec![n, m], out))
        }
        _ => Err(Error::shape("concat", format!("axis {axis}"))),
    }
}

/// Evaluates every node of `tape`. Fails on shape mismatches, missing inputs,
/// and any non-finite intermediate value.
pub fn forward(tape: &Tape, inputs: &(impl InputSource + ?Sized)) -> Result<Values> {
    let mut values: Vec<Tensor> = Vec::with_capacity(tape.nodes.len());
    for op in &tape.nodes {
        let out = eval_op(op, &values, inputs)?;
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("tape op `{}`", op.name())));
        }
        values.push(out);
    }
    Ok(Values { values })
}

/// Gradient of a scalar `output` with respect to the named inputs.
pub fn gradient(tape: &Tape, values: &Values, output: NodeId, wrt: &[&str]) -> Result<Gradients> {
    let out = values.get(output);
    if !out.is_scalar() {
        return Err(Error::NonScalarOutput(out.len()));
    }
    let seed = Tensor::filled(out.shape(), 1.0);
    vjp(tape, values, output, &seed, wrt)
}

/// Vector-Jacobian product: pulls `seed` (shaped like `output`) back to the
/// named inputs. Inputs not reached by the output get zero gradients.
pub fn vjp(
    tape: &Tape,
    values: &Values,
    output: NodeId,
    seed: &Tensor,
    wrt: &[&str],
) -> Result<Gradients> {
    let n = tape.nodes.len();
    if output >= n {
        return Err(Error::invalid(format!("output node {output} out of range")));
    }
    if !seed.same_shape(values.get(output)) {
        return Err(Error::shape(
            "vjp",
            format!("seed {:?} vs output {:?}", seed.shape(), values.get(output).shape()),
        ));
    }

    let mut needs = vec![false; n];
    for (id, op) in tape.nodes.iter().enumerate() {
        needs[id] = match op {
            Op::Input(name) => wrt.contains(&name.as_str()),
            Op::Const(_) => false,
            other => other.inputs().iter().any(|&i| needs[i]),
        };
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[output] = Some(seed.clone());

    for id in (0..=output).rev() {
        if !needs[id] {
            continue;
        }
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        let op = &tape.nodes[id];
        if let Op::Input(_) = op {
            grads[id] = Some(g);
            continue;
        }
        backward_op(op, id, &g, values, &needs, &mut grads)?;
    }

    let mut by_name = BTreeMap::new();
    for (id, op) in tape.nodes.iter().enumerate() {
        if let Op::Input(name) = op {
            if !wrt.contains(&name.as_str()) {
                continue;
            }
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(values.get(id).shape()));
            by_name
                .entry(name.clone())
                .and_modify(|acc: &mut Tensor| acc.accumulate(&g))
                .or_insert(g);
        }
    }
    for name in wrt {
        if !by_name.contains_key(*name) {
            return Err(Error::invalid(format!("no tape input named `{name}`")));
        }
    }
    for (name, g) in &by_name {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    Ok(Gradients { by_name })
}

fn accumulate(grads: &mut [Option<Tensor>], needs: &[bool], id: NodeId, g: Tensor) {
    if !needs[id] {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.accumulate(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backward_op(
    op: &Op,
    id: NodeId,
    g: &Tensor,
    values: &Values,
    needs: &[bool],
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let v = |i: NodeId| values.get(i);
    match op {
        Op::Input(_) | Op::Const(_) => {}
        Op::Add(a, b) => {
            accumulate(grads, needs, *a, g.clone());
            accumulate(grads, needs, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, needs, *a, g.clone());
            accumulate(grads, needs, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            if needs[*a] {
                accumulate(grads, needs, *a, g.zip(v(*b), |x, y| x * y));
            }
            if needs[*b] {
                accumulate(grads, needs, *b, g.zip(v(*a), |x, y| x * y));
            }
        }
        Op::AddRow(a, r) => {
            accumulate(grads, needs, *a, g.clone());
            if needs[*r] {
                accumulate(grads, needs, *r, col_sums(g));
            }
        }
        Op::SubRow(a, r) => {
            accumulate(grads, needs, *a, g.clone());
            if needs[*r] {
                accumulate(grads, needs, *r, col_sums(g).map(|x| -x));
            }
        }
        Op::MulRow(a, r) => {
            if needs[*a] {
                let ga = broadcast_row("mul_row", g, v(*r), |x, y| x * y)?;
                accumulate(grads, needs, *a, ga);
            }
            if needs[*r] {
                accumulate(grads, needs, *r, col_sums(&g.zip(v(*a), |x, y| x * y)));
            }
        }
        Op::Scale(a, c) => accumulate(grads, needs, *a, g.map(|x| x * c)),
        Op::DivScalar(a, s) => {
            let d = v(*s).item();
            if needs[*a] {
                accumulate(grads, needs, *a, g.map(|x| x / d));
            }
            if needs[*s] {
                let gs = -g.dot(v(*a)) / (d * d);
                accumulate(grads, needs, *s, Tensor::filled(v(*s).shape(), gs));
            }
        }
        Op::MatMul(a, b) => {
            let (n, k) = (v(*a).rows(), v(*a).cols());
            let m = v(*b).cols();
            if needs[*a] {
                let ga = matmul_nt(g.data(), v(*b).data(), n, m, k);
                accumulate(grads, needs, *a, Tensor::from_parts(vec![n, k], ga));
            }
            if needs[*b] {
                let gb = matmul_tn(v(*a).data(), g.data(), n, k, m);
                accumulate(grads, needs, *b, Tensor::from_parts(vec![k, m], gb));
            }
        }
        Op::Transpose(a) => {
            let (n, m) = (g.rows(), g.cols());
            accumulate(
                grads,
                needs,
                *a,
                Tensor::from_parts(vec![m, n], transpose(g.data(), n, m)),
            );
        }
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            for &p in parts {
                let shape = v(p).shape().to_vec();
                let (pr, pc) = (shape[0], shape[1]);
                if needs[p] {
                    let piece = match axis {
                        0 => g.data()[offset * pc..(offset + pr) * pc].to_vec(),
                        _ => {
                            let mut out = Vec::with_capacity(pr * pc);
                            for r in 0..pr {
                                out.extend_from_slice(&g.row_slice(r)[offset..offset + pc]);
                            }
                            out
                        }
                    };
                    accumulate(grads, needs, p, Tensor::from_parts(shape, piece));
                }
                offset += if *axis == 0 { pr } else { pc };
            }
        }
        Op::Slice {
            x,
            axis,
            start,
            len,
        } => {
            let shape = v(*x).shape().to_vec();
            let (n, m) = (shape[0], shape[1]);
            let mut full = vec![0.0; n * m];
            match axis {
                0 => full[start * m..(start + len) * m].copy_from_slice(g.data()),
                _ => {
                    for r in 0..n {
                        full[r * m + start..r * m + start + len].copy_from_slice(g.row_slice(r));
                    }
                }
            }
            accumulate(grads, needs, *x, Tensor::from_parts(shape, full));
        }
        Op::Sum(a) => accumulate(grads, needs, *a, Tensor::filled(v(*a).shape(), g.item())),
        Op::Mean(a) => {
            let n = v(*a).len() as f64;
            accumulate(grads, needs, *a, Tensor::filled(v(*a).shape(), g.item() / n));
        }
        Op::Exp(a) => accumulate(grads, needs, *a, g.zip(values.get(id), |x, y| x * y)),
        Op::Log(a) => accumulate(grads, needs, *a, g.zip(v(*a), |x, y| x / y)),
        Op::Sqrt(a) => accumulate(
            grads,
            needs,
            *a,
            g.zip(values.get(id), |x, y| if y == 0.0 { 0.0 } else { x / (2.0 * y) }),
        ),
        Op::Square(a) => accumulate(grads, needs, *a, g.zip(v(*a), |x, y| 2.0 * x * y)),
        Op::Relu(a) => accumulate(
            grads,
            needs,
            *a,
            g.zip(v(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
        ),
        Op::Gelu(a) => accumulate(grads, needs, *a, g.zip(v(*a), |x, y| x * gelu_grad(y))),
        Op::SoftmaxRows(a) => {
            let y = values.get(id);
            let (n, m) = (y.rows(), y.cols());
            let mut out = Vec::with_capacity(n * m);
            for r in 0..n {
                let yr = y.row_slice(r);
                let gr = g.row_slice(r);
                let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                out.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - s)));
            }
            accumulate(grads, needs, *a, Tensor::from_parts(vec![n, m], out));
        }
        Op::LayerNormRows(a, eps) => {
            let x = v(*a);
            let (n, m) = (x.rows(), x.cols());
            let mf = m as f64;
            let mut out = Vec::with_capacity(n * m);
            for r in 0..n {
                let row = x.row_slice(r);
                let gr = g.row_slice(r);
                let (mean, inv) = layer_norm_stats(row, *eps);
                let g_mean = gr.iter().sum::<f64>() / mf;
                let gx_mean = row
                    .iter()
                    .zip(gr)
                    .map(|(xv, gv)| (xv - mean) * inv * gv)
                    .sum::<f64>()
                    / mf;
                out.extend(
                    row.iter()
                        .zip(gr)
                        .map(|(xv, gv)| inv * (gv - g_mean - (xv - mean) * inv * gx_mean)),
                );
            }
            accumulate(grads, needs, *a, Tensor::from_parts(vec![n, m], out));
        }
        Op::Gather(table, idx) => {
            let shape = v(*table).shape().to_vec();
            let e = shape[1];
            let mut full = vec![0.0; shape[0] * e];
            for (row, &i) in idx.iter().enumerate() {
                for (dst, src) in full[i * e..(i + 1) * e].iter_mut().zip(g.row_slice(row)) {
                    *dst += src;
                }
            }
            accumulate(grads, needs, *table, Tensor::from_parts(shape, full));
        }
        Op::RowNorms(a) => {
            let x = v(*a);
            let norms = values.get(id);
            let (n, m) = (x.rows(), x.cols());
            let mut out = Vec::with_capacity(n * m);
            for r in 0..n {
                let nr = norms.data()[r];
                let gr = g.data()[r];
                if nr == 0.0 {
                    out.extend(std::iter::repeat(0.0).take(m));
                } else {
                    out.extend(x.row_slice(r).iter().map(|xv| gr * xv / nr));
                }
            }
            accumulate(grads, needs, *a, Tensor::from_parts(vec![n, m], out));
        }
    }
    Ok(())
}
