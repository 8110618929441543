use std::ops::Range;

use crate::array::{matmul, matmul_at, matmul_bt, Array};
use crate::error::{AutodiffError, Result};
use crate::params::ParameterSet;

/// Inputs to the natural log are clamped to at least this value.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice { src: Var, row: usize, col: usize },
    Reshape(Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Hinge(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    RowNorms(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulCol(..) => "mul_col",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Ln(..) => "ln",
            Op::Hinge(..) => "hinge",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::RowNorms(..) => "row_norms",
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
    grad: Option<Array>,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the arena index is already a
/// topological order and [`Graph::backward`] just walks it in reverse. A
/// graph is meant to live for a single forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, String)>,
    // One byte per element of every kinked op (ln floor, hinge, clamp, zero
    // norm), recording which side of the kink the forward pass took.
    branches: Vec<u8>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Which side of each kink the forward pass took, in op order.
    pub fn branch_signature(&self) -> &[u8] {
        &self.branches
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient but is not tied to a parameter set.
    pub fn variable(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter from `params` as a differentiable leaf. Gradients
    /// flow back into the set through [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, params: &ParameterSet, path: &str) -> Result<Var> {
        let value = params.value(path)?.clone();
        let v = self.push(value, Op::Leaf, true);
        self.bindings.push((v, path.to_string()));
        Ok(v)
    }

    /// Same value as `v`, cut off from the gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        Array::raw(va.rows(), va.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Array {
        let va = &self.nodes[a.0].value;
        Array::raw(va.rows(), va.cols(), va.as_slice().iter().map(|&x| f(x)).collect())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AutodiffError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let value = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1 x c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(AutodiffError::Shape { op: "add_row", lhs: sa, rhs: sr });
        }
        let va = &self.nodes[a.0].value;
        let vr = self.nodes[row.0].value.as_slice();
        let mut data = va.as_slice().to_vec();
        for chunk in data.chunks_mut(sa.1.max(1)) {
            for (x, r) in chunk.iter_mut().zip(vr) {
                *x += r;
            }
        }
        let value = Array::raw(sa.0, sa.1, data);
        Ok(self.derived(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    /// Scales row `i` of `a` by `col[i]`; `col` is `rows x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(AutodiffError::Shape { op: "mul_col", lhs: sa, rhs: sc });
        }
        let va = &self.nodes[a.0].value;
        let vc = self.nodes[col.0].value.as_slice();
        let mut data = va.as_slice().to_vec();
        for (chunk, c) in data.chunks_mut(sa.1.max(1)).zip(vc) {
            for x in chunk {
                *x *= c;
            }
        }
        let value = Array::raw(sa.0, sa.1, data);
        Ok(self.derived(value, Op::MulCol(a, col), &[a, col]))
    }

    /// Elementwise quotient. Division by zero is not guarded here.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.zip_with(a, b, |x, y| x / y);
        Ok(self.derived(value, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(AutodiffError::NonFinite { index: 0, value: factor });
        }
        let value = self.map(a, |x| x * factor);
        Ok(self.derived(value, Op::Scale(a, factor), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let cols = self.shape(first).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(AutodiffError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: s,
                });
            }
            rows += s.0;
            data.extend_from_slice(self.nodes[p.0].value.as_slice());
        }
        let value = Array::raw(rows, cols, data);
        Ok(self.derived(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(AutodiffError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let value = Array::raw(rows, cols, data);
        Ok(self.derived(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice(&mut self, src: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let s = self.shape(src);
        if rows.start > rows.end || cols.start > cols.end || rows.end > s.0 || cols.end > s.1 {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {rows:?} x {cols:?} outside shape {s:?}"),
            });
        }
        let v = &self.nodes[src.0].value;
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&v.row(r)[cols.clone()]);
        }
        let value = Array::raw(rows.len(), cols.len(), data);
        let op = Op::Slice {
            src,
            row: rows.start,
            col: cols.start,
        };
        Ok(self.derived(value, op, &[src]))
    }

    pub fn slice_rows(&mut self, src: Var, rows: Range<usize>) -> Result<Var> {
        let cols = self.shape(src).1;
        self.slice(src, rows, 0..cols)
    }

    pub fn slice_cols(&mut self, src: Var, cols: Range<usize>) -> Result<Var> {
        let rows = self.shape(src).0;
        self.slice(src, 0..rows, cols)
    }

    /// Reinterprets the row-major data under a new shape.
    pub fn reshape(&mut self, src: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shape(src);
        if s.0 * s.1 != rows * cols {
            return Err(AutodiffError::Shape {
                op: "reshape",
                lhs: s,
                rhs: (rows, cols),
            });
        }
        let value = Array::raw(rows, cols, self.nodes[src.0].value.as_slice().to_vec());
        Ok(self.derived(value, Op::Reshape(src), &[src]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.transpose();
        Ok(self.derived(value, Op::Transpose(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, sigmoid);
        Ok(self.derived(value, Op::Sigmoid(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::tanh);
        Ok(self.derived(value, Op::Tanh(a), &[a]))
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x.max(LOG_FLOOR).ln());
        let below = self.map(a, |x| if x < LOG_FLOOR { 1.0 } else { 0.0 });
        self.branches.extend(below.as_slice().iter().map(|&b| b as u8));
        Ok(self.derived(value, Op::Ln(a), &[a]))
    }

    /// `max(0, x)` elementwise.
    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        self.branches.extend(v.as_slice().iter().map(|&x| u8::from(x > 0.0)));
        let value = self.map(a, |x| x.max(0.0));
        Ok(self.derived(value, Op::Hinge(a), &[a]))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(AutodiffError::InvalidArgument {
                op: "clamp",
                msg: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let v = &self.nodes[a.0].value;
        self.branches.extend(v.as_slice().iter().map(|&x| {
            if x < lo {
                0
            } else if x > hi {
                2
            } else {
                1
            }
        }));
        let value = self.map(a, |x| x.clamp(lo, hi));
        Ok(self.derived(value, Op::Clamp(a, lo, hi), &[a]))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.nodes[a.0].value.as_slice().iter().sum();
        Ok(self.derived(Array::raw(1, 1, vec![total]), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                msg: "empty input".into(),
            });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Euclidean norm of each row, as a `rows x 1` node. A `1 x n` input
    /// gives the ordinary vector l2-norm.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let sq: f64 = v.row(r).iter().map(|x| x * x).sum();
            data.push(sq.sqrt());
        }
        self.branches.extend(data.iter().map(|&n| u8::from(n == 0.0)));
        Ok(self.derived(Array::raw(rows, 1, data), Op::RowNorms(a), &[a]))
    }

    /// Reverse pass from a scalar root. Leaf gradients are added to whatever
    /// they already hold, so repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        let mut adj: Vec<Option<Array>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Array::ones(1, 1));
        let mut leaf_grads = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let mut send = |v: Var, contribution: Array| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(existing) => existing.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            };
            let out = &node.value;
            let elementwise = |x: &Array, f: &dyn Fn(f64, f64) -> f64| {
                let data = x.as_slice().iter().zip(g.as_slice()).map(|(&a, &b)| f(a, b)).collect();
                Array::raw(x.rows(), x.cols(), data)
            };

            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul(a, b) => {
                    if nodes[a.0].needs_grad {
                        send(*a, matmul_bt(&g, val(*b)));
                    }
                    if nodes[b.0].needs_grad {
                        send(*b, matmul_at(val(*a), &g));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddRow(a, row) => {
                    let cols = g.cols();
                    let mut acc = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (s, x) in acc.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    send(*row, Array::raw(1, cols, acc));
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    let neg = elementwise(&g, &|_, d| -d);
                    send(*a, g);
                    send(*b, neg);
                }
                Op::Mul(a, b) => {
                    send(*a, elementwise(val(*b), &|y, d| y * d));
                    send(*b, elementwise(val(*a), &|x, d| x * d));
                }
                Op::MulCol(a, col) => {
                    let (va, vc) = (val(*a), val(*col));
                    let cols = va.cols();
                    let mut ga = g.as_slice().to_vec();
                    let mut gc = vec![0.0; va.rows()];
                    for r in 0..va.rows() {
                        let c = vc.as_slice()[r];
                        for k in 0..cols {
                            let d = g.as_slice()[r * cols + k];
                            ga[r * cols + k] = d * c;
                            gc[r] += d * va.as_slice()[r * cols + k];
                        }
                    }
                    send(*a, Array::raw(va.rows(), cols, ga));
                    send(*col, Array::raw(va.rows(), 1, gc));
                }
                Op::Div(a, b) => {
                    let vb = val(*b);
                    send(*a, elementwise(vb, &|y, d| d / y));
                    // d(a/b)/db = -(a/b)/b
                    let q = out.as_slice();
                    let data = vb
                        .as_slice()
                        .iter()
                        .zip(q)
                        .zip(g.as_slice())
                        .map(|((&y, &qv), &d)| -d * qv / y)
                        .collect();
                    send(*b, Array::raw(vb.rows(), vb.cols(), data));
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    send(*a, elementwise(&g, &|_, d| d * f));
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let rows = val(*p).rows();
                        let chunk = g.as_slice()[offset * cols..(offset + rows) * cols].to_vec();
                        send(*p, Array::raw(rows, cols, chunk));
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|p| val(*p).cols()).collect();
                    let rows = g.rows();
                    let mut pieces: Vec<Vec<f64>> =
                        widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                    for r in 0..rows {
                        let mut c0 = 0;
                        let row = g.row(r);
                        for (piece, &w) in pieces.iter_mut().zip(&widths) {
                            piece.extend_from_slice(&row[c0..c0 + w]);
                            c0 += w;
                        }
                    }
                    for ((p, piece), w) in parts.iter().zip(pieces).zip(widths) {
                        send(*p, Array::raw(rows, w, piece));
                    }
                }
                Op::Slice { src, row, col } => {
                    if !nodes[src.0].needs_grad {
                        continue;
                    }
                    let vs = val(*src);
                    let cols = vs.cols();
                    // accumulate in place instead of materializing a mostly-zero gradient
                    let slot = adj[src.0].get_or_insert_with(|| Array::zeros(vs.rows(), cols));
                    let data = slot.data_mut();
                    for r in 0..g.rows() {
                        let dst = (row + r) * cols + col;
                        for (d, &v) in data[dst..dst + g.cols()].iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::Reshape(src) => {
                    let s = val(*src).shape();
                    send(*src, Array::raw(s.0, s.1, g.into_vec()));
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Sigmoid(a) => send(*a, elementwise(out, &|y, d| d * y * (1.0 - y))),
                Op::Tanh(a) => send(*a, elementwise(out, &|y, d| d * (1.0 - y * y))),
                Op::Ln(a) => send(
                    *a,
                    elementwise(val(*a), &|x, d| if x < LOG_FLOOR { 0.0 } else { d / x }),
                ),
                Op::Hinge(a) => send(*a, elementwise(val(*a), &|x, d| if x > 0.0 { d } else { 0.0 })),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    send(
                        *a,
                        elementwise(val(*a), &|x, d| if x >= lo && x <= hi { d } else { 0.0 }),
                    )
                }
                Op::Sum(a) => {
                    let s = val(*a).shape();
                    let d = g.as_slice()[0];
                    send(*a, Array::raw(s.0, s.1, vec![d; s.0 * s.1]));
                }
                Op::RowNorms(a) => {
                    let va = val(*a);
                    let cols = va.cols();
                    let mut data = vec![0.0; va.len()];
                    for r in 0..va.rows() {
                        let n = out.as_slice()[r];
                        if n == 0.0 {
                            continue;
                        }
                        let d = g.as_slice()[r];
                        for k in 0..cols {
                            data[r * cols + k] = d * va.as_slice()[r * cols + k] / n;
                        }
                    }
                    send(*a, Array::raw(va.rows(), cols, data));
                }
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Adds the gradients of every bound parameter leaf into `params`.
    pub fn accumulate_param_grads(&self, params: &mut ParameterSet) -> Result<()> {
        for (v, path) in &self.bindings {
            if let Some(g) = &self.nodes[v.0].grad {
                params.add_grad(path, g)?;
            }
        }
        Ok(())
    }
}
