//! Reverse-mode automatic differentiation on a linear operation tape.
//!
//! Every forward operation appends a node to the [`Tape`]; nodes hold the
//! produced [`Tensor`] and the operation that made it, so the tape is a
//! topologically ordered computation record. [`Tape::backward`] replays the
//! record in reverse and accumulates gradients into every node;
//! [`Tape::replay`] re-executes the forward pass from the leaves, which is
//! bit-identical to the original because both paths share [`eval_op`].
//!
//! All tensors are dense, row-major, rank-2 `f64`; vectors are `1 x n` rows.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::fmath;

/// Position of a tensor in its tape's computation record.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(pub(crate) u32);

impl TensorId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

/// Elementwise activation kinds.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

/// Probabilities below this are clamped before `ln` so softmax underflow
/// cannot produce non-finite values.
pub const LN_CLAMP: f64 = 1e-300;

/// Surrogate for minus infinity applied to masked softmax logits.
pub const NEG_INF_SURROGATE: f64 = f64::MIN;

/// A recorded operation. Inputs are earlier tape positions.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// `A(m x k) @ B(k x n)`
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    /// `X(m x n) + bias(1 x n)` broadcast over rows.
    AddRow(TensorId, TensorId),
    /// `X(m x n) + v(m x 1)` broadcast over columns.
    AddCol(TensorId, TensorId),
    /// Elementwise product.
    Mul(TensorId, TensorId),
    /// Multiplication by a runtime constant (not differentiated through).
    Scale(TensorId, f64),
    Act(TensorId, Activation),
    /// Row-wise softmax; `mask[i*n+j] == true` excludes an entry (its output
    /// is exactly zero).
    SoftmaxRows { x: TensorId, mask: Option<Vec<bool>> },
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceCols { x: TensorId, from: usize, to: usize },
    /// Stack `table` rows selected by `ids`; gradient scatter-adds back.
    GatherRows { table: TensorId, ids: Vec<u32> },
    /// `out[i] = x[i, cols[i]]`, result `m x 1`.
    PickPerRow { x: TensorId, cols: Vec<u32> },
    /// Column means, result `1 x n`.
    MeanRows(TensorId),
    /// Natural log with underflow clamp at [`LN_CLAMP`].
    Ln(TensorId),
    /// Sum of all entries, result `1 x 1`.
    SumAll(TensorId),
}

/// Dense tensor stored on the tape.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    /// Populated by `backward`; same shape as `values`.
    pub grad: Option<Vec<f64>>,
    pub id: TensorId,
}

impl Tensor {
    pub fn dims(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    LengthMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    EmptyConcat,
    /// A softmax row with every entry masked has no distribution.
    FullyMaskedRow { row: usize },
    NonScalarLoss { rows: usize, cols: usize },
    ZeroDim { op: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            TensorError::LengthMismatch { op, expected, found } => {
                write!(f, "{op}: expected {expected} values, found {found}")
            }
            TensorError::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (< {bound} required)")
            }
            TensorError::EmptyConcat => write!(f, "concat: empty input list"),
            TensorError::FullyMaskedRow { row } => {
                write!(f, "softmax: row {row} is fully masked")
            }
            TensorError::NonScalarLoss { rows, cols } => {
                write!(f, "backward: loss must be 1x1, got {rows}x{cols}")
            }
            TensorError::ZeroDim { op } => write!(f, "{op}: zero-sized dimension"),
        }
    }
}

impl core::error::Error for TensorError {}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// The computation record plus its tensor arena.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.index()].tensor
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.index()].tensor.values
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let t = self.tensor(id);
        (t.rows, t.cols)
    }

    /// Gradient of a node, if `backward` has run.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.index()].tensor.grad.as_deref()
    }

    /// Value of a 1x1 tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let t = self.tensor(id);
        debug_assert_eq!((t.rows, t.cols), (1, 1));
        t.values[0]
    }

    // -- node construction ------------------------------------------------

    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<TensorId, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::ZeroDim { op: "leaf" });
        }
        if values.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                op: "leaf",
                expected: rows * cols,
                found: values.len(),
            });
        }
        Ok(self.push(rows, cols, values, Op::Leaf))
    }

    pub fn row_leaf(&mut self, values: Vec<f64>) -> Result<TensorId, TensorError> {
        let n = values.len();
        self.leaf(1, n, values)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Result<TensorId, TensorError> {
        self.leaf(rows, cols, vec![0.0; rows * cols])
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node {
            tensor: Tensor { rows, cols, values, grad: None, id },
            op,
        });
        id
    }

    fn record(&mut self, op: Op) -> Result<TensorId, TensorError> {
        let in_shapes: Vec<(usize, usize)> =
            op_inputs(&op).iter().map(|&i| self.shape(i)).collect();
        let (rows, cols) = out_shape(&op, &in_shapes)?;
        let ins: Vec<(usize, usize, &[f64])> = op_inputs(&op)
            .iter()
            .map(|&i| {
                let t = self.tensor(i);
                (t.rows, t.cols, t.values.as_slice())
            })
            .collect();
        let values = eval_op(&op, &ins);
        debug_assert_eq!(values.len(), rows * cols);
        Ok(self.push(rows, cols, values, op))
    }

    // -- operations --------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.record(Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.record(Op::Transpose(x))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.record(Op::Add(a, b))
    }

    /// Add a `1 x n` bias row to every row of `x`.
    pub fn add_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        self.record(Op::AddRow(x, bias))
    }

    /// Add an `m x 1` column vector to every column of `x`.
    pub fn add_col(&mut self, x: TensorId, v: TensorId) -> Result<TensorId, TensorError> {
        self.record(Op::AddCol(x, v))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        self.record(Op::Scale(x, c))
    }

    pub fn activation(&mut self, x: TensorId, kind: Activation) -> Result<TensorId, TensorError> {
        self.record(Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Row-wise softmax with per-row max subtraction. Masked entries are set
    /// to [`NEG_INF_SURROGATE`] before the exponential and come out exactly
    /// zero. A fully masked row is rejected.
    pub fn softmax_rows(
        &mut self,
        x: TensorId,
        mask: Option<Vec<bool>>,
    ) -> Result<TensorId, TensorError> {
        if let Some(m) = &mask {
            let (rows, cols) = self.shape(x);
            if m.len() != rows * cols {
                return Err(TensorError::LengthMismatch {
                    op: "softmax",
                    expected: rows * cols,
                    found: m.len(),
                });
            }
            for r in 0..rows {
                if m[r * cols..(r + 1) * cols].iter().all(|&b| b) {
                    return Err(TensorError::FullyMaskedRow { row: r });
                }
            }
        }
        self.record(Op::SoftmaxRows { x, mask })
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: TensorId, from: usize, to: usize) -> Result<TensorId, TensorError> {
        let (_, cols) = self.shape(x);
        if from >= to || to > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: to,
                bound: cols + 1,
            });
        }
        self.record(Op::SliceCols { x, from, to })
    }

    pub fn gather_rows(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId, TensorError> {
        let (rows, _) = self.shape(table);
        if ids.is_empty() {
            return Err(TensorError::ZeroDim { op: "gather_rows" });
        }
        for &i in ids {
            if i as usize >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i as usize,
                    bound: rows,
                });
            }
        }
        self.record(Op::GatherRows { table, ids: ids.to_vec() })
    }

    pub fn pick_per_row(&mut self, x: TensorId, cols: &[u32]) -> Result<TensorId, TensorError> {
        let (rows, width) = self.shape(x);
        if cols.len() != rows {
            return Err(TensorError::LengthMismatch {
                op: "pick_per_row",
                expected: rows,
                found: cols.len(),
            });
        }
        for &c in cols {
            if c as usize >= width {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick_per_row",
                    index: c as usize,
                    bound: width,
                });
            }
        }
        self.record(Op::PickPerRow { x, cols: cols.to_vec() })
    }

    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.record(Op::MeanRows(x))
    }

    pub fn ln(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.record(Op::Ln(x))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.record(Op::SumAll(x))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Every node receives a gradient
    /// buffer; nodes the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let (lr, lc) = self.shape(loss);
        if (lr, lc) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: lr, cols: lc });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|nd| vec![0.0; nd.tensor.values.len()])
            .collect();
        let mut reached = vec![false; n];
        grads[loss.index()][0] = 1.0;
        reached[loss.index()] = true;

        for idx in (0..n).rev() {
            if !reached[idx] {
                continue;
            }
            // Take the output gradient out to sidestep aliasing with inputs.
            let g = core::mem::take(&mut grads[idx]);
            self.backward_op(idx, &g, &mut grads, &mut reached);
            grads[idx] = g;
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.tensor.grad = Some(g);
        }
        Ok(())
    }

    fn backward_op(&self, idx: usize, g: &[f64], grads: &mut [Vec<f64>], reached: &mut [bool]) {
        let node = &self.nodes[idx];
        let out = &node.tensor;
        let mut touch = |id: TensorId| reached[id.index()] = true;

        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.shape(*a);
                let (_, nn) = self.shape(*b);
                let av = self.values(*a);
                let bv = self.values(*b);
                // dA += G . B^T
                let da = &mut grads[a.index()];
                for i in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for l in 0..nn {
                            acc += g[i * nn + l] * bv[j * nn + l];
                        }
                        da[i * k + j] += acc;
                    }
                }
                // dB += A^T . G
                let db = &mut grads[b.index()];
                for i in 0..k {
                    for j in 0..nn {
                        let mut acc = 0.0;
                        for l in 0..m {
                            acc += av[l * k + i] * g[l * nn + j];
                        }
                        db[i * nn + j] += acc;
                    }
                }
                touch(*a);
                touch(*b);
            }
            Op::Transpose(x) => {
                let (m, nn) = self.shape(*x);
                let dx = &mut grads[x.index()];
                for i in 0..m {
                    for j in 0..nn {
                        dx[i * nn + j] += g[j * m + i];
                    }
                }
                touch(*x);
            }
            Op::Add(a, b) => {
                for (d, gi) in grads[a.index()].iter_mut().zip(g) {
                    *d += gi;
                }
                for (d, gi) in grads[b.index()].iter_mut().zip(g) {
                    *d += gi;
                }
                touch(*a);
                touch(*b);
            }
            Op::AddRow(x, bias) => {
                let (m, nn) = self.shape(*x);
                for (d, gi) in grads[x.index()].iter_mut().zip(g) {
                    *d += gi;
                }
                let db = &mut grads[bias.index()];
                for i in 0..m {
                    for j in 0..nn {
                        db[j] += g[i * nn + j];
                    }
                }
                touch(*x);
                touch(*bias);
            }
            Op::AddCol(x, v) => {
                let (m, nn) = self.shape(*x);
                for (d, gi) in grads[x.index()].iter_mut().zip(g) {
                    *d += gi;
                }
                let dv = &mut grads[v.index()];
                for i in 0..m {
                    for j in 0..nn {
                        dv[i] += g[i * nn + j];
                    }
                }
                touch(*x);
                touch(*v);
            }
            Op::Mul(a, b) => {
                let av = self.values(*a);
                let bv = self.values(*b);
                {
                    let da = &mut grads[a.index()];
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                {
                    let db = &mut grads[b.index()];
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
                touch(*a);
                touch(*b);
            }
            Op::Scale(x, c) => {
                let dx = &mut grads[x.index()];
                for i in 0..g.len() {
                    dx[i] += g[i] * c;
                }
                touch(*x);
            }
            Op::Act(x, kind) => {
                let xv = self.values(*x);
                let yv = &out.values;
                let dx = &mut grads[x.index()];
                match kind {
                    Activation::Relu => {
                        for i in 0..g.len() {
                            if xv[i] > 0.0 {
                                dx[i] += g[i];
                            }
                        }
                    }
                    Activation::Tanh => {
                        for i in 0..g.len() {
                            dx[i] += g[i] * (1.0 - yv[i] * yv[i]);
                        }
                    }
                    Activation::Sigmoid => {
                        for i in 0..g.len() {
                            dx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                        }
                    }
                }
                touch(*x);
            }
            Op::SoftmaxRows { x, .. } => {
                let (m, nn) = self.shape(*x);
                let yv = &out.values;
                let dx = &mut grads[x.index()];
                for r in 0..m {
                    let base = r * nn;
                    let mut dot = 0.0;
                    for j in 0..nn {
                        dot += g[base + j] * yv[base + j];
                    }
                    for j in 0..nn {
                        dx[base + j] += yv[base + j] * (g[base + j] - dot);
                    }
                }
                touch(*x);
            }
            Op::ConcatRows(parts) => {
                let cols = out.cols;
                let mut row0 = 0;
                for p in parts {
                    let (pr, _) = self.shape(*p);
                    let dp = &mut grads[p.index()];
                    let src = &g[row0 * cols..(row0 + pr) * cols];
                    for (d, gi) in dp.iter_mut().zip(src) {
                        *d += gi;
                    }
                    row0 += pr;
                    touch(*p);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows;
                let total = out.cols;
                let mut col0 = 0;
                for p in parts {
                    let (_, pc) = self.shape(*p);
                    let dp = &mut grads[p.index()];
                    for i in 0..rows {
                        for j in 0..pc {
                            dp[i * pc + j] += g[i * total + col0 + j];
                        }
                    }
                    col0 += pc;
                    touch(*p);
                }
            }
            Op::SliceCols { x, from, to } => {
                let (m, nn) = self.shape(*x);
                let w = to - from;
                let dx = &mut grads[x.index()];
                for i in 0..m {
                    for j in 0..w {
                        dx[i * nn + from + j] += g[i * w + j];
                    }
                }
                touch(*x);
            }
            Op::GatherRows { table, ids } => {
                let (_, cols) = self.shape(*table);
                let dt = &mut grads[table.index()];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = id as usize * cols;
                    for j in 0..cols {
                        dt[dst + j] += g[i * cols + j];
                    }
                }
                touch(*table);
            }
            Op::PickPerRow { x, cols } => {
                let (_, nn) = self.shape(*x);
                let dx = &mut grads[x.index()];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * nn + c as usize] += g[i];
                }
                touch(*x);
            }
            Op::MeanRows(x) => {
                let (m, nn) = self.shape(*x);
                let inv = 1.0 / m as f64;
                let dx = &mut grads[x.index()];
                for i in 0..m {
                    for j in 0..nn {
                        dx[i * nn + j] += g[j] * inv;
                    }
                }
                touch(*x);
            }
            Op::Ln(x) => {
                let xv = self.values(*x);
                let dx = &mut grads[x.index()];
                for i in 0..g.len() {
                    dx[i] += g[i] / xv[i].max(LN_CLAMP);
                }
                touch(*x);
            }
            Op::SumAll(x) => {
                let dx = &mut grads[x.index()];
                for d in dx.iter_mut() {
                    *d += g[0];
                }
                touch(*x);
            }
        }
    }

    // -- replay ------------------------------------------------------------

    /// Re-execute the record from the leaves. Returns the recomputed value
    /// buffers, index-aligned with the tape.
    pub fn replay(&self) -> Vec<Vec<f64>> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let out = match &node.op {
                Op::Leaf => node.tensor.values.clone(),
                op => {
                    let ins: Vec<(usize, usize, &[f64])> = op_inputs(op)
                        .iter()
                        .map(|&i| {
                            let t = self.tensor(i);
                            (t.rows, t.cols, vals[i.index()].as_slice())
                        })
                        .collect();
                    eval_op(op, &ins)
                }
            };
            vals.push(out);
        }
        vals
    }

    /// True when a fresh replay reproduces every stored value bit for bit.
    pub fn replay_is_bit_identical(&self) -> bool {
        self.replay().iter().zip(&self.nodes).all(|(v, node)| {
            v.len() == node.tensor.values.len()
                && v.iter()
                    .zip(&node.tensor.values)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}

fn op_inputs(op: &Op) -> Vec<TensorId> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Matmul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::AddCol(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::Transpose(x)
        | Op::Scale(x, _)
        | Op::Act(x, _)
        | Op::SoftmaxRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::PickPerRow { x, .. }
        | Op::MeanRows(x)
        | Op::Ln(x)
        | Op::SumAll(x) => vec![*x],
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        Op::GatherRows { table, .. } => vec![*table],
    }
}

fn out_shape(op: &Op, ins: &[(usize, usize)]) -> Result<(usize, usize), TensorError> {
    match op {
        Op::Leaf => unreachable!("leaves are pushed directly"),
        Op::Matmul(..) => {
            let (a, b) = (ins[0], ins[1]);
            if a.1 != b.0 {
                return Err(TensorError::ShapeMismatch { op: "matmul", left: a, right: b });
            }
            Ok((a.0, b.1))
        }
        Op::Transpose(_) => Ok((ins[0].1, ins[0].0)),
        Op::Add(..) | Op::Mul(..) => {
            if ins[0] != ins[1] {
                let op_name = if matches!(op, Op::Add(..)) { "add" } else { "mul" };
                return Err(TensorError::ShapeMismatch { op: op_name, left: ins[0], right: ins[1] });
            }
            Ok(ins[0])
        }
        Op::AddRow(..) => {
            if ins[1] != (1, ins[0].1) {
                return Err(TensorError::ShapeMismatch { op: "add_row", left: ins[0], right: ins[1] });
            }
            Ok(ins[0])
        }
        Op::AddCol(..) => {
            if ins[1] != (ins[0].0, 1) {
                return Err(TensorError::ShapeMismatch { op: "add_col", left: ins[0], right: ins[1] });
            }
            Ok(ins[0])
        }
        Op::Scale(..) | Op::Act(..) | Op::SoftmaxRows { .. } | Op::Ln(_) => Ok(ins[0]),
        Op::ConcatRows(_) => {
            let cols = ins[0].1;
            let mut rows = 0;
            for &s in ins {
                if s.1 != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        left: ins[0],
                        right: s,
                    });
                }
                rows += s.0;
            }
            Ok((rows, cols))
        }
        Op::ConcatCols(_) => {
            let rows = ins[0].0;
            let mut cols = 0;
            for &s in ins {
                if s.0 != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        left: ins[0],
                        right: s,
                    });
                }
                cols += s.1;
            }
            Ok((rows, cols))
        }
        Op::SliceCols { from, to, .. } => Ok((ins[0].0, to - from)),
        Op::GatherRows { ids, .. } => Ok((ids.len(), ins[0].1)),
        Op::PickPerRow { .. } => Ok((ins[0].0, 1)),
        Op::MeanRows(_) => Ok((1, ins[0].1)),
        Op::SumAll(_) => Ok((1, 1)),
    }
}

/// Pure forward kernel shared by recording and replay.
fn eval_op(op: &Op, ins: &[(usize, usize, &[f64])]) -> Vec<f64> {
    match op {
        Op::Leaf => unreachable!("leaves are pushed directly"),
        Op::Matmul(..) => {
            let (m, k, a) = ins[0];
            let (_, n, b) = ins[1];
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (l, &av) in arow.iter().enumerate() {
                    let brow = &b[l * n..(l + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            out
        }
        Op::Transpose(_) => {
            let (m, n, x) = ins[0];
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x[i * n + j];
                }
            }
            out
        }
        Op::Add(..) => ins[0].2.iter().zip(ins[1].2).map(|(a, b)| a + b).collect(),
        Op::AddRow(..) => {
            let (m, n, x) = ins[0];
            let bias = ins[1].2;
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(x[i * n + j] + bias[j]);
                }
            }
            out
        }
        Op::AddCol(..) => {
            let (m, n, x) = ins[0];
            let v = ins[1].2;
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(x[i * n + j] + v[i]);
                }
            }
            out
        }
        Op::Mul(..) => ins[0].2.iter().zip(ins[1].2).map(|(a, b)| a * b).collect(),
        Op::Scale(_, c) => ins[0].2.iter().map(|a| a * c).collect(),
        Op::Act(_, kind) => {
            let x = ins[0].2;
            match kind {
                Activation::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                Activation::Tanh => x.iter().map(|&v| fmath::tanh(v)).collect(),
                Activation::Sigmoid => x.iter().map(|&v| fmath::sigmoid(v)).collect(),
            }
        }
        Op::SoftmaxRows { mask, .. } => {
            let (m, n, x) = ins[0];
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                let base = r * n;
                let masked = |j: usize| mask.as_ref().is_some_and(|mk| mk[base + j]);
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    let v = if masked(j) { NEG_INF_SURROGATE } else { x[base + j] };
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let v = if masked(j) { NEG_INF_SURROGATE } else { x[base + j] };
                    let e = fmath::exp(v - mx);
                    out[base + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j] /= sum;
                }
            }
            out
        }
        Op::ConcatRows(_) => {
            let mut out = Vec::new();
            for &(_, _, v) in ins {
                out.extend_from_slice(v);
            }
            out
        }
        Op::ConcatCols(_) => {
            let rows = ins[0].0;
            let total: usize = ins.iter().map(|s| s.1).sum();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for &(_, c, v) in ins {
                    out.extend_from_slice(&v[i * c..(i + 1) * c]);
                }
            }
            out
        }
        Op::SliceCols { from, to, .. } => {
            let (m, n, x) = ins[0];
            let mut out = Vec::with_capacity(m * (to - from));
            for i in 0..m {
                out.extend_from_slice(&x[i * n + from..i * n + to]);
            }
            out
        }
        Op::GatherRows { ids, .. } => {
            let (_, cols, t) = ins[0];
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                let base = id as usize * cols;
                out.extend_from_slice(&t[base..base + cols]);
            }
            out
        }
        Op::PickPerRow { cols, .. } => {
            let (_, n, x) = ins[0];
            cols.iter()
                .enumerate()
                .map(|(i, &c)| x[i * n + c as usize])
                .collect()
        }
        Op::MeanRows(_) => {
            let (m, n, x) = ins[0];
            let inv = 1.0 / m as f64;
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += x[i * n + j];
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
            out
        }
        Op::Ln(_) => ins[0].2.iter().map(|&v| fmath::ln(v.max(LN_CLAMP))).collect(),
        Op::SumAll(_) => vec![ins[0].2.iter().sum()],
    }
}
