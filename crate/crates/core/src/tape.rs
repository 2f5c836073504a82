//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations append nodes in execution order, so every node's inputs sit at
//! lower indices and a single reverse sweep propagates adjoints through each
//! recorded operation exactly once. Values are dense row-major `f64` buffers;
//! most operations are defined on 2-D tensors (matrices), scalars are shape
//! `[1]`.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-D tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("function is not deterministic: two evaluations at the same point differ")]
    NonDeterministic,
    #[error("gradient missing on a parameter passed to {op}")]
    MissingGrad { op: &'static str },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Injected backward-pass fault, used by the self-check harness to prove the
/// gradient verification actually detects a corrupted operation.
#[derive(Debug, Clone)]
pub struct GradFault {
    /// Operation name as reported by [`Tape::apply`] kinds (e.g. `"tanh"`).
    pub op: String,
    /// Multiplier applied to the corrupted operation's input gradient.
    pub scale: f64,
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[r,c] + [1,c]`, the bias pattern.
    AddRow(Var, Var),
    /// `[r,c] * [r,1]` broadcast over columns.
    MulCol(Var, Var),
    /// `[r,c] / [r,1]` broadcast over columns.
    DivCol(Var, Var),
    /// `[r,c] / [1,c]` broadcast over rows.
    DivRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Ln(Var),
    /// Square root; gradient is zeroed below [`SQRT_GUARD`] to keep the
    /// degenerate x = 0 case finite.
    Sqrt(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Scale(Var, f64),
    AddConst(Var),
    /// Elementwise `max(x, c)`.
    MaxConst(Var, f64),
    /// Elementwise integer power.
    PowI(Var, u32),
    Clamp(Var, f64, f64),
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    SliceCols {
        input: Var,
        start: usize,
        len: usize,
    },
    /// `[r,c] -> [1,c]` mean over rows.
    ColumnMean(Var),
    /// `[r,c] -> [1,c]` min over rows; saves the winning row per column.
    ColumnMin(Var, Vec<usize>),
    ColumnMax(Var, Vec<usize>),
    /// `[r,c] -> [r,1]` sum over columns.
    RowSum(Var),
    MeanAll(Var),
    SumSquares(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add-row",
            Op::MulCol(..) => "mul-col",
            Op::DivCol(..) => "div-col",
            Op::DivRow(..) => "div-row",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::SoftmaxRows(..) => "softmax-rows",
            Op::Transpose(..) => "transpose",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add-const",
            Op::MaxConst(..) => "max-const",
            Op::PowI(..) => "pow-i",
            Op::Clamp(..) => "clamp",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice-cols",
            Op::ColumnMean(..) => "column-mean",
            Op::ColumnMin(..) => "column-min",
            Op::ColumnMax(..) => "column-max",
            Op::RowSum(..) => "row-sum",
            Op::MeanAll(..) => "mean",
            Op::SumSquares(..) => "sum-squares",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradient of `sqrt` is cut off below this to avoid the 1/0 blow-up at the
/// origin; values themselves are never altered.
const SQRT_GUARD: f64 = 1e-18;

/// Operation kinds accepted by the generic [`Tape::apply`] dispatcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Matmul,
    Add,
    Mul,
    Tanh,
    Relu,
    Sigmoid,
    SoftmaxRows,
    Concat { axis: usize },
    Mean,
    SumSquares,
    Transpose,
    Scale { factor: f64 },
}

/// Record of executed differentiable operations.
///
/// Confined to a single thread for the duration of one forward/backward
/// pass; all state it captures is copied in, so the source tensors stay
/// value-semantic.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<GradFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    /// Install (or clear) a backward-pass fault for mutation testing.
    pub fn set_fault(&mut self, fault: Option<GradFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a tensor as a differentiable leaf (gradient tracked when the
    /// tensor asks for it).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Record a tensor as a constant (never tracked).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node shapes are consistent by construction")
    }

    /// Gradient of the last `backward` call with respect to `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn need(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mat(&self, op: &'static str, v: Var) -> Result<(usize, usize), TapeError> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(TapeError::NotMatrix {
                op,
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Forward operations ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (m, k) = self.mat("matmul", a)?;
        let (k2, n) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let rg = self.need(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), rg))
    }

    fn elementwise2(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var, TapeError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TapeError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.need(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.elementwise2("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.elementwise2("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.elementwise2("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Matrix plus row vector: `[r,c] + [1,c]`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var, TapeError> {
        let (r, c) = self.mat("add-row", m)?;
        let (vr, vc) = self.mat("add-row", v)?;
        if vr != 1 || vc != c {
            return Err(TapeError::ShapeMismatch {
                op: "add-row",
                lhs: vec![r, c],
                rhs: vec![vr, vc],
            });
        }
        let mut data = self.nodes[m.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.nodes[v.0].data[j];
            }
        }
        let rg = self.need(&[m, v]);
        Ok(self.push(vec![r, c], data, Op::AddRow(m, v), rg))
    }

    fn col_broadcast(
        &mut self,
        op: &'static str,
        m: Var,
        u: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var, TapeError> {
        let (r, c) = self.mat(op, m)?;
        let (ur, uc) = self.mat(op, u)?;
        if ur != r || uc != 1 {
            return Err(TapeError::ShapeMismatch {
                op,
                lhs: vec![r, c],
                rhs: vec![ur, uc],
            });
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let s = self.nodes[u.0].data[i];
            for j in 0..c {
                data[i * c + j] = f(self.nodes[m.0].data[i * c + j], s);
            }
        }
        let rg = self.need(&[m, u]);
        Ok(self.push(vec![r, c], data, make(m, u), rg))
    }

    /// `[r,c] * [r,1]`, each row scaled by its entry of `u`.
    pub fn mul_col(&mut self, m: Var, u: Var) -> Result<Var, TapeError> {
        self.col_broadcast("mul-col", m, u, |x, s| x * s, Op::MulCol)
    }

    /// `[r,c] / [r,1]`, each row divided by its entry of `u`.
    pub fn div_col(&mut self, m: Var, u: Var) -> Result<Var, TapeError> {
        self.col_broadcast("div-col", m, u, |x, s| x / s, Op::DivCol)
    }

    /// `[r,c] / [1,c]`, each column divided by its entry of `v`.
    pub fn div_row(&mut self, m: Var, v: Var) -> Result<Var, TapeError> {
        let (r, c) = self.mat("div-row", m)?;
        let (vr, vc) = self.mat("div-row", v)?;
        if vr != 1 || vc != c {
            return Err(TapeError::ShapeMismatch {
                op: "div-row",
                lhs: vec![r, c],
                rhs: vec![vr, vc],
            });
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = self.nodes[m.0].data[i * c + j] / self.nodes[v.0].data[j];
            }
        }
        let rg = self.need(&[m, v]);
        Ok(self.push(vec![r, c], data, Op::DivRow(m, v), rg))
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        make: impl Fn(Var) -> Op,
    ) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, make(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, |v| Op::Scale(v, factor))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, |v| Op::AddConst(v))
    }

    pub fn max_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v.max(c), |v| Op::MaxConst(v, c))
    }

    pub fn pow_i(&mut self, x: Var, k: u32) -> Var {
        self.unary(x, |v| v.powi(k as i32), |v| Op::PowI(v, k))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), |v| Op::Clamp(v, lo, hi))
    }

    /// Row-wise softmax with the usual max-shift for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TapeError> {
        let (r, c) = self.mat("softmax-rows", x)?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![r, c], data, Op::SoftmaxRows(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TapeError> {
        let (r, c) = self.mat("transpose", x)?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.nodes[x.0].data[i * c + j];
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![c, r], data, Op::Transpose(x), rg))
    }

    /// Concatenate 2-D tensors along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::InvalidArg {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        if axis > 1 {
            return Err(TapeError::InvalidArg {
                op: "concat",
                msg: format!("axis {axis} out of range for 2-D concat"),
            });
        }
        let (r0, c0) = self.mat("concat", parts[0])?;
        let mut rows = r0;
        let mut cols = c0;
        for &p in &parts[1..] {
            let (r, c) = self.mat("concat", p)?;
            if axis == 0 {
                if c != c0 {
                    return Err(TapeError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(TapeError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                cols += c;
            }
        }
        let mut data = vec![0.0; rows * cols];
        if axis == 0 {
            let mut at = 0;
            for &p in parts {
                let n = self.nodes[p.0].data.len();
                data[at..at + n].copy_from_slice(&self.nodes[p.0].data);
                at += n;
            }
        } else {
            let mut col_at = 0;
            for &p in parts {
                let (r, c) = (self.nodes[p.0].shape[0], self.nodes[p.0].shape[1]);
                for i in 0..r {
                    let src = &self.nodes[p.0].data[i * c..(i + 1) * c];
                    data[i * cols + col_at..i * cols + col_at + c].copy_from_slice(src);
                }
                col_at += c;
            }
        }
        let rg = self.need(parts);
        Ok(self.push(
            vec![rows, cols],
            data,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        let (r, c) = self.mat("slice-cols", x)?;
        if start + len > c || len == 0 {
            return Err(TapeError::InvalidArg {
                op: "slice-cols",
                msg: format!("range {start}..{} out of 0..{c}", start + len),
            });
        }
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[x.0].data[i * c + start..i * c + start + len]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            vec![r, len],
            data,
            Op::SliceCols {
                input: x,
                start,
                len,
            },
            rg,
        ))
    }

    pub fn column_mean(&mut self, x: Var) -> Result<Var, TapeError> {
        let (r, c) = self.mat("column-mean", x)?;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += self.nodes[x.0].data[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![1, c], data, Op::ColumnMean(x), rg))
    }

    fn column_extreme(&mut self, x: Var, min: bool) -> Result<Var, TapeError> {
        let op = if min { "column-min" } else { "column-max" };
        let (r, c) = self.mat(op, x)?;
        let mut data = vec![0.0; c];
        let mut arg = vec![0usize; c];
        for j in 0..c {
            let mut best = self.nodes[x.0].data[j];
            let mut best_i = 0;
            for i in 1..r {
                let v = self.nodes[x.0].data[i * c + j];
                if (min && v < best) || (!min && v > best) {
                    best = v;
                    best_i = i;
                }
            }
            data[j] = best;
            arg[j] = best_i;
        }
        let rg = self.nodes[x.0].requires_grad;
        let node_op = if min {
            Op::ColumnMin(x, arg)
        } else {
            Op::ColumnMax(x, arg)
        };
        Ok(self.push(vec![1, c], data, node_op, rg))
    }

    pub fn column_min(&mut self, x: Var) -> Result<Var, TapeError> {
        self.column_extreme(x, true)
    }

    pub fn column_max(&mut self, x: Var) -> Result<Var, TapeError> {
        self.column_extreme(x, false)
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var, TapeError> {
        let (r, c) = self.mat("row-sum", x)?;
        let mut data = vec![0.0; r];
        for i in 0..r {
            data[i] = self.nodes[x.0].data[i * c..(i + 1) * c].iter().sum();
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![r, 1], data, Op::RowSum(x), rg))
    }

    /// Mean of all elements, a `[1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let m = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![1], vec![m], Op::MeanAll(x), rg)
    }

    /// Sum of squared elements, a `[1]` scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].data.iter().map(|v| v * v).sum::<f64>();
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![1], vec![s], Op::SumSquares(x), rg)
    }

    /// Generic dispatcher over the public operation kinds.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, TapeError> {
        let arity = |n: usize, op: &'static str| -> Result<(), TapeError> {
            if inputs.len() != n {
                Err(TapeError::InvalidArg {
                    op,
                    msg: format!("expected {n} inputs, got {}", inputs.len()),
                })
            } else {
                Ok(())
            }
        };
        match kind {
            OpKind::Matmul => {
                arity(2, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2, "mul")?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Tanh => {
                arity(1, "tanh")?;
                Ok(self.tanh(inputs[0]))
            }
            OpKind::Relu => {
                arity(1, "relu")?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Sigmoid => {
                arity(1, "sigmoid")?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::SoftmaxRows => {
                arity(1, "softmax-rows")?;
                self.softmax_rows(inputs[0])
            }
            OpKind::Concat { axis } => self.concat(axis, inputs),
            OpKind::Mean => {
                arity(1, "mean")?;
                Ok(self.mean_all(inputs[0]))
            }
            OpKind::SumSquares => {
                arity(1, "sum-squares")?;
                Ok(self.sum_squares(inputs[0]))
            }
            OpKind::Transpose => {
                arity(1, "transpose")?;
                self.transpose(inputs[0])
            }
            OpKind::Scale { factor } => {
                arity(1, "scale")?;
                Ok(self.scale(inputs[0], factor))
            }
        }
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; adjoints land in per-node gradient
    /// buffers readable through [`Tape::grad`]. Tracked leaves that the loss
    /// does not reach keep a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TapeError> {
        if self.nodes.is_empty() {
            return Err(TapeError::EmptyTape);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TapeError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(vec![0.0; n.data.len()])
                } else {
                    None
                }
            })
            .collect();
        if self.grads[loss.0].is_none() {
            // Constant loss: all gradients stay zero.
            return Ok(());
        }
        self.grads[loss.0].as_mut().unwrap()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() {
                continue;
            }
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn fault_scale(&self, op: &'static str) -> f64 {
        match &self.fault {
            Some(f) if f.op == op => f.scale,
            _ => 1.0,
        }
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        if let Some(buf) = self.grads[v.0].as_mut() {
            for (b, &c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let fs = self.fault_scale(self.nodes[idx].op.name());
        // The op is cheap to reconstruct; avoid borrowing self.nodes across
        // the mutable accumulate calls.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.wants(a) {
                    // dA = G * B^T
                    let bt = transpose_raw(&self.nodes[b.0].data, k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_raw(g, &bt, m, n, k, &mut da);
                    if fs != 1.0 {
                        da.iter_mut().for_each(|v| *v *= fs);
                    }
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    // dB = A^T * G
                    let at = transpose_raw(&self.nodes[a.0].data, m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_raw(&at, g, k, m, n, &mut db);
                    if fs != 1.0 {
                        db.iter_mut().for_each(|v| *v *= fs);
                    }
                    self.accumulate(b, &db);
                }
            }
            &Op::Add(a, b) => {
                let ga: Vec<f64> = g.iter().map(|&v| v * fs).collect();
                self.accumulate(a, &ga);
                self.accumulate(b, &ga);
            }
            &Op::Sub(a, b) => {
                let ga: Vec<f64> = g.iter().map(|&v| v * fs).collect();
                let gb: Vec<f64> = g.iter().map(|&v| -v * fs).collect();
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&gv, &bv)| gv * bv * fs)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &av)| gv * av * fs)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            &Op::AddRow(m_v, v_v) => {
                let (r, c) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                if self.wants(m_v) {
                    let gm: Vec<f64> = g.iter().map(|&v| v * fs).collect();
                    self.accumulate(m_v, &gm);
                }
                if self.wants(v_v) {
                    let mut gv = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += g[i * c + j];
                        }
                    }
                    gv.iter_mut().for_each(|v| *v *= fs);
                    self.accumulate(v_v, &gv);
                }
            }
            &Op::MulCol(m_v, u_v) => {
                let (r, c) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                if self.wants(m_v) {
                    let mut gm = vec![0.0; r * c];
                    for i in 0..r {
                        let s = self.nodes[u_v.0].data[i];
                        for j in 0..c {
                            gm[i * c + j] = g[i * c + j] * s * fs;
                        }
                    }
                    self.accumulate(m_v, &gm);
                }
                if self.wants(u_v) {
                    let mut gu = vec![0.0; r];
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j] * self.nodes[m_v.0].data[i * c + j];
                        }
                        gu[i] = s * fs;
                    }
                    self.accumulate(u_v, &gu);
                }
            }
            &Op::DivCol(m_v, u_v) => {
                let (r, c) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                if self.wants(m_v) {
                    let mut gm = vec![0.0; r * c];
                    for i in 0..r {
                        let s = self.nodes[u_v.0].data[i];
                        for j in 0..c {
                            gm[i * c + j] = g[i * c + j] / s * fs;
                        }
                    }
                    self.accumulate(m_v, &gm);
                }
                if self.wants(u_v) {
                    let mut gu = vec![0.0; r];
                    for i in 0..r {
                        let s = self.nodes[u_v.0].data[i];
                        let mut acc = 0.0;
                        for j in 0..c {
                            // d(m/u)/du = -m/u^2 = -y/u
                            acc -= g[i * c + j] * self.nodes[idx].data[i * c + j] / s;
                        }
                        gu[i] = acc * fs;
                    }
                    self.accumulate(u_v, &gu);
                }
            }
            &Op::DivRow(m_v, v_v) => {
                let (r, c) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                if self.wants(m_v) {
                    let mut gm = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] = g[i * c + j] / self.nodes[v_v.0].data[j] * fs;
                        }
                    }
                    self.accumulate(m_v, &gm);
                }
                if self.wants(v_v) {
                    let mut gv = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] -= g[i * c + j] * self.nodes[idx].data[i * c + j]
                                / self.nodes[v_v.0].data[j];
                        }
                    }
                    gv.iter_mut().for_each(|v| *v *= fs);
                    self.accumulate(v_v, &gv);
                }
            }
            &Op::Tanh(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[idx].data)
                    .map(|(&gv, &y)| gv * (1.0 - y * y) * fs)
                    .collect();
                self.accumulate(x, &dx);
            }
            &Op::Sigmoid(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[idx].data)
                    .map(|(&gv, &y)| gv * y * (1.0 - y) * fs)
                    .collect();
                self.accumulate(x, &dx);
            }
            &Op::Relu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&gv, &v)| if v > 0.0 { gv * fs } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            &Op::Ln(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&gv, &v)| gv / v * fs)
                    .collect();
                self.accumulate(x, &dx);
            }
            &Op::Sqrt(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&gv, &v)| {
                        if v >= SQRT_GUARD {
                            gv / (2.0 * v.sqrt()) * fs
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(x, &dx);
            }
            &Op::SoftmaxRows(x) => {
                let (r, c) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &self.nodes[idx].data[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..c {
                        dx[i * c + j] = y[j] * (gr[j] - dot) * fs;
                    }
                }
                self.accumulate(x, &dx);
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                let dx = transpose_raw(g, r, c);
                if fs == 1.0 {
                    self.accumulate(x, &dx);
                } else {
                    let dx: Vec<f64> = dx.iter().map(|&v| v * fs).collect();
                    self.accumulate(x, &dx);
                }
            }
            &Op::Scale(x, factor) => {
                let dx: Vec<f64> = g.iter().map(|&v| v * factor * fs).collect();
                self.accumulate(x, &dx);
            }
            &Op::AddConst(x) => {
                let dx: Vec<f64> = g.iter().map(|&v| v * fs).collect();
                self.accumulate(x, &dx);
            }
            &Op::MaxConst(x, c) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&gv, &v)| if v > c { gv * fs } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            &Op::PowI(x, k) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&gv, &v)| gv * k as f64 * v.powi(k as i32 - 1) * fs)
                    .collect();
                self.accumulate(x, &dx);
            }
            &Op::Clamp(x, lo, hi) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&gv, &v)| if v > lo && v < hi { gv * fs } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Concat { axis, parts } => {
                let parts = parts.clone();
                let axis = *axis;
                let cols = self.nodes[idx].shape[1];
                if axis == 0 {
                    let mut at = 0;
                    for p in parts {
                        let n = self.nodes[p.0].data.len();
                        if self.wants(p) {
                            let dp: Vec<f64> = g[at..at + n].iter().map(|&v| v * fs).collect();
                            self.accumulate(p, &dp);
                        }
                        at += n;
                    }
                } else {
                    let mut col_at = 0;
                    for p in parts {
                        let (r, c) = (self.nodes[p.0].shape[0], self.nodes[p.0].shape[1]);
                        if self.wants(p) {
                            let mut dp = vec![0.0; r * c];
                            for i in 0..r {
                                for j in 0..c {
                                    dp[i * c + j] = g[i * cols + col_at + j] * fs;
                                }
                            }
                            self.accumulate(p, &dp);
                        }
                        col_at += c;
                    }
                }
            }
            &Op::SliceCols { input, start, len } => {
                let (r, c) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..len {
                        dx[i * c + start + j] = g[i * len + j] * fs;
                    }
                }
                self.accumulate(input, &dx);
            }
            &Op::ColumnMean(x) => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let inv = 1.0 / r as f64;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j] * inv * fs;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::ColumnMin(x, arg) | Op::ColumnMax(x, arg) => {
                let x = *x;
                let arg = arg.clone();
                let c = self.nodes[idx].shape[1];
                let (r, _) = (self.nodes[x.0].shape[0], ());
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    dx[arg[j] * c + j] = g[j] * fs;
                }
                self.accumulate(x, &dx);
            }
            &Op::RowSum(x) => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[i] * fs;
                    }
                }
                self.accumulate(x, &dx);
            }
            &Op::MeanAll(x) => {
                let n = self.nodes[x.0].data.len();
                let v = g[0] / n as f64 * fs;
                let dx = vec![v; n];
                self.accumulate(x, &dx);
            }
            &Op::SumSquares(x) => {
                let dx: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .map(|&v| 2.0 * v * g[0] * fs)
                    .collect();
                self.accumulate(x, &dx);
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

// ── Finite-difference verification ─────────────────────────────────────

/// Compare the analytic gradient of `f` with central finite differences at
/// `points`, returning the worst relative error over all coordinates of all
/// point tensors.
///
/// `f` must be deterministic (it is evaluated twice at the base point and
/// must agree bitwise) and must build a scalar loss from the given leaves.
pub fn finite_diff_check<F>(f: F, points: &[Tensor], h: f64) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TapeError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |pts: &[Tensor]| -> Result<f64, TapeError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.nodes[loss.0].data.len() != 1 {
            return Err(TapeError::NonScalarLoss {
                shape: tape.nodes[loss.0].shape.clone(),
            });
        }
        Ok(tape.scalar_value(loss))
    };

    let mut base: Vec<Tensor> = points.to_vec();
    for t in &mut base {
        t.requires_grad = true;
    }

    let v0 = eval(&base)?;
    let v1 = eval(&base)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(TapeError::NonDeterministic);
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = base.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf requires grad").to_vec())
        .collect();

    let mut worst = 0.0f64;
    for (ti, tensor) in base.iter().enumerate() {
        for ci in 0..tensor.numel() {
            let orig = tensor.data()[ci];
            let mut shifted = base.clone();
            shifted[ti].data_mut()[ci] = orig + h;
            let fp = eval(&shifted)?;
            shifted[ti].data_mut()[ci] = orig - h;
            let fm = eval(&shifted)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ci];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leafed(tape: &mut Tape, rows: &[Vec<f64>], rg: bool) -> Var {
        let mut t = Tensor::from_rows(rows).unwrap();
        t.requires_grad = rg;
        tape.leaf(&t)
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[vec![0.0, 0.0]], false);
        let y = tape.apply(OpKind::SoftmaxRows, &[x]).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = leafed(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]], false);
        let v = leafed(&mut tape, &[vec![3.0], vec![4.0]], false);
        let y = tape.apply(OpKind::Matmul, &[i2, v]).unwrap();
        assert_eq!(tape.data(y), &[3.0, 4.0]);
        assert_eq!(tape.shape(y), &[2, 1]);
    }

    #[test]
    fn tanh_origin() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[vec![0.0]], false);
        let y = tape.apply(OpKind::Tanh, &[x]).unwrap();
        assert_eq!(tape.data(y), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = leafed(&mut tape, &[vec![1.0, 2.0]], false);
        let b = leafed(&mut tape, &[vec![1.0, 2.0]], false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[1, 2]"), "{msg}");
    }

    #[test]
    fn backward_sum_squares() {
        // loss = sum(w^2), w = [3] -> grad = [6]
        let mut tape = Tape::new();
        let w = leafed(&mut tape, &[vec![3.0]], true);
        let loss = tape.sum_squares(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[vec![0.0]], true);
        let s = tape.sigmoid(x);
        let loss = tape.mean_all(s);
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leafed(&mut tape, &[vec![1.0, 2.0]], true);
        let y = tape.tanh(x);
        assert!(matches!(
            tape.backward(y),
            Err(TapeError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let used = leafed(&mut tape, &[vec![2.0]], true);
        let unused = leafed(&mut tape, &[vec![5.0]], true);
        let loss = tape.sum_squares(used);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn three_layer_net_matches_finite_differences() {
        // A small random MLP: relu(x W1 + b1) -> tanh(. W2) -> sum of squares.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let rand_mat = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
            Tensor::new(
                vec![r, c],
                (0..r * c).map(|_| rng.random_range(-0.8..0.8)).collect(),
            )
            .unwrap()
        };
        let x = rand_mat(&mut rng, 3, 4);
        let w1 = rand_mat(&mut rng, 4, 5);
        let b1 = rand_mat(&mut rng, 1, 5);
        let w2 = rand_mat(&mut rng, 5, 2);
        let err = finite_diff_check(
            |tape, vars| {
                let xc = tape.constant(&x);
                let h = tape.matmul(xc, vars[0])?;
                let h = tape.add_row(h, vars[1])?;
                let h = tape.relu(h);
                let h = tape.matmul(h, vars[2])?;
                let h = tape.tanh(h);
                Ok(tape.sum_squares(h))
            },
            &[w1, b1, w2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "finite-difference mismatch: {err}");
    }

    #[test]
    fn finite_diff_quadratic_is_exact() {
        let w = Tensor::new(vec![1, 3], vec![0.7, -1.2, 2.5]).unwrap();
        let err = finite_diff_check(|tape, vars| Ok(tape.sum_squares(vars[0])), &[w], 1e-5).unwrap();
        assert!(err < 1e-9, "quadratic should be exact, got {err}");
    }

    #[test]
    fn finite_diff_detects_corrupted_backward() {
        let x = Tensor::new(vec![1, 3], vec![0.3, -0.4, 0.9]).unwrap();
        let err = finite_diff_check(
            |tape, vars| {
                tape.set_fault(Some(GradFault {
                    op: "tanh".into(),
                    scale: 1.1,
                }));
                let y = tape.tanh(vars[0]);
                Ok(tape.sum_squares(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "corrupted backward must be caught, got {err}");
    }

    #[test]
    fn finite_diff_rejects_nondeterministic() {
        use std::cell::Cell;
        let calls = Cell::new(0.0f64);
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let res = finite_diff_check(
            |tape, vars| {
                calls.set(calls.get() + 1.0);
                let noisy = tape.add_const(vars[0], calls.get());
                Ok(tape.sum_squares(noisy))
            },
            &[x],
            1e-5,
        );
        assert!(matches!(res, Err(TapeError::NonDeterministic)));
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        // Every primitive, over 20 random small configurations.
        for trial in 0..20 {
            per_op_gradient_trial(trial);
        }
    }

    fn per_op_gradient_trial(trial: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7 + trial);
        let (m, k, n) = (
            rng.random_range(1..5usize),
            rng.random_range(1..5usize),
            rng.random_range(1..5usize),
        );
        let mut rand_t = |r: usize, c: usize, lo: f64, hi: f64| {
            Tensor::new(
                vec![r, c],
                (0..r * c).map(|_| rng.random_range(lo..hi)).collect(),
            )
            .unwrap()
        };
        type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TapeError>>;
        let a = rand_t(m, k, -1.0, 1.0);
        let b = rand_t(k, n, -1.0, 1.0);
        let c = rand_t(m, k, -1.0, 1.0);
        let row = rand_t(1, k, -1.0, 1.0);
        let col = rand_t(m, 1, 0.5, 2.0);
        let pos = rand_t(m, k, 0.1, 2.0);
        let probs = rand_t(m, 1, 0.15, 0.85);
        let cases: Vec<(&str, Vec<Tensor>, BuildFn)> = vec![
            (
                "matmul",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    Ok(t.sum_squares(y))
                }),
            ),
            (
                "add/mul/sub",
                vec![a.clone(), c.clone()],
                Box::new(|t, v| {
                    let s = t.add(v[0], v[1])?;
                    let m = t.mul(s, v[1])?;
                    let d = t.sub(m, v[0])?;
                    Ok(t.sum_squares(d))
                }),
            ),
            (
                "add_row",
                vec![a.clone(), row.clone()],
                Box::new(|t, v| {
                    let y = t.add_row(v[0], v[1])?;
                    Ok(t.sum_squares(y))
                }),
            ),
            (
                "mul_col/div_col",
                vec![a.clone(), col.clone()],
                Box::new(|t, v| {
                    let y = t.mul_col(v[0], v[1])?;
                    let z = t.div_col(y, v[1])?;
                    let w = t.mul_col(z, v[1])?;
                    Ok(t.sum_squares(w))
                }),
            ),
            (
                "div_row",
                vec![a.clone(), rand_t(1, k, 0.5, 2.0)],
                Box::new(|t, v| {
                    let y = t.div_row(v[0], v[1])?;
                    Ok(t.sum_squares(y))
                }),
            ),
            (
                "activations",
                vec![a.clone()],
                Box::new(|t, v| {
                    let y = t.tanh(v[0]);
                    let y = t.sigmoid(y);
                    let y = t.scale(y, 3.0);
                    Ok(t.sum_squares(y))
                }),
            ),
            (
                "ln/sqrt/pow",
                vec![pos.clone()],
                Box::new(|t, v| {
                    let y = t.ln(v[0]);
                    let y = t.add_const(y, 2.0);
                    let y = t.pow_i(y, 3);
                    let s = t.sum_squares(y);
                    Ok(t.sqrt(s))
                }),
            ),
            (
                "softmax_rows",
                vec![a.clone()],
                Box::new(|t, v| {
                    let y = t.softmax_rows(v[0])?;
                    let y = t.pow_i(y, 2);
                    Ok(t.mean_all(y))
                }),
            ),
            (
                "transpose/concat/slice",
                vec![a.clone(), c.clone()],
                Box::new(move |t, v| {
                    let at = t.transpose(v[0])?;
                    let bt = t.transpose(v[1])?;
                    let cat = t.concat(1, &[at, bt])?;
                    let sl = t.slice_cols(cat, 1, m)?;
                    Ok(t.sum_squares(sl))
                }),
            ),
            (
                "column stats",
                vec![a.clone()],
                Box::new(|t, v| {
                    let mn = t.column_min(v[0])?;
                    let mx = t.column_max(v[0])?;
                    let mean = t.column_mean(v[0])?;
                    let range = t.sub(mx, mn)?;
                    let range = t.max_const(range, 1e-3);
                    let z = t.div_row(v[0], range)?;
                    let zc = t.add_row(z, mean)?;
                    let rs = t.row_sum(zc)?;
                    Ok(t.sum_squares(rs))
                }),
            ),
            (
                "clamp/mean",
                vec![probs.clone()],
                Box::new(|t, v| {
                    let y = t.clamp(v[0], 1e-7, 1.0 - 1e-7);
                    let y = t.ln(y);
                    Ok(t.mean_all(y))
                }),
            ),
        ];
        for (name, tensors, build) in cases {
            let err = finite_diff_check(|t, v| build(t, v), &tensors, 1e-5).unwrap();
            assert!(err < 1e-3, "op {name}: finite-difference error {err}");
        }
    }

    #[test]
    fn concat_axis0_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = leafed(&mut tape, &[vec![1.0, 2.0]], false);
        let b = leafed(&mut tape, &[vec![3.0, 4.0], vec![5.0, 6.0]], false);
        let cat = tape.concat(0, &[a, b]).unwrap();
        assert_eq!(tape.shape(cat), &[3, 2]);
        assert_eq!(tape.data(cat), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn fixed_seed_forward_backward_is_bitwise_stable() {
        use rand::{Rng, SeedableRng};
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            let w = Tensor::new(
                vec![4, 4],
                (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
            .with_requires_grad();
            let x = Tensor::new(
                vec![2, 4],
                (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let wv = tape.leaf(&w);
            let xv = tape.constant(&x);
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.tanh(h);
            let loss = tape.sum_squares(h);
            tape.backward(loss).unwrap();
            (
                tape.scalar_value(loss).to_bits(),
                tape.grad(wv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..6, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
            let t = Tensor::new(vec![rows, cols], data.clone()).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(&t);
            let y = tape.softmax_rows(x).unwrap();
            for i in 0..rows {
                let s: f64 = tape.data(y)[i * cols..(i + 1) * cols].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            // Shift invariance: adding a constant per row leaves the output unchanged.
            let shifted: Vec<f64> = data.iter().map(|v| v + 17.5).collect();
            let t2 = Tensor::new(vec![rows, cols], shifted).unwrap();
            let mut tape2 = Tape::new();
            let x2 = tape2.leaf(&t2);
            let y2 = tape2.softmax_rows(x2).unwrap();
            for (a, b) in tape.data(y).iter().zip(tape2.data(y2)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
