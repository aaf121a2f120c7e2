//! Tensor-level reverse-mode differentiation.
//!
//! Every operation is evaluated eagerly and, when recording, appended to the
//! [`Tape`] together with the handles of its inputs. Node indices grow
//! monotonically, so the tape is always in topological order and the reverse
//! sweep is a plain descending loop.
//!
//! Vector-Jacobian products are themselves expressed as tape operations. A
//! reverse sweep run with `create_graph` therefore records a differentiable
//! gradient graph, which is what the gradient penalty of the critic needs.
//! Operations registered through [`CustomOp`] only provide numeric products
//! and refuse to take part in a recorded gradient graph.

use std::collections::HashMap;
use std::sync::Arc;

use super::sparse::SparseMatrix;
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied numerically.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (or `None` for inputs that receive none).
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone)]
enum Op {
    Const,
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    SpMM {
        matrix: Arc<SparseMatrix>,
        transpose: bool,
        x: Var,
    },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    PadCols { x: Var, start: usize },
    ConcatCols(Var, Var),
    Sum(Var),
    Broadcast(Var),
    SumRows(Var),
    BroadcastRows(Var),
    SumCols(Var),
    BroadcastCols(Var),
    Gather { x: Var, idx: Arc<Vec<usize>> },
    ScatterAdd { x: Var, idx: Arc<Vec<usize>> },
    Conv2d(Var, Var),
    Conv2dInputGrad(Var, Var),
    Conv2dWeightGrad { x: Var, g: Var },
    Custom { inputs: Vec<Var>, op: Arc<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Pow(..) => "pow",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Clamp(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SpMM { .. } => "spmm",
            Op::Reshape(..) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::ConcatCols(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Broadcast(..) => "broadcast",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Conv2d(..) => "conv2d",
            Op::Conv2dInputGrad(..) => "conv2d_input_grad",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Multiplies the vector-Jacobian product of one named operation by a
/// constant. Only used to build negative controls for gradient checking.
#[derive(Clone, Debug, PartialEq)]
pub struct VjpFault {
    pub op: String,
    pub factor: f64,
}

/// Gradients of a scalar with respect to the differentiable leaves of a tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var)
    }

    /// Gradient of `var`, or zeros shaped like it when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, tape: &Tape, var: Var) -> Tensor {
        self.map
            .get(&var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.map.iter()
    }
}

/// Record of executed operations. One tape per training step.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    enabled: bool,
    fault: Option<VjpFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const FORWARD_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "concat",
    "biased_relu",
    "relu",
    "tanh",
    "sin",
    "cos",
    "sum",
    "mean",
    "l2_norm",
    "conv2d",
    "max_pool2",
];

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            enabled: true,
            fault: None,
        }
    }

    /// A tape that never records: every value is a constant.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
            enabled: false,
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: Option<VjpFault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a leaf tensor; `requires_grad` is ignored on a no-grad tape.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Re-inserts the value of `v` as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Const },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return contract(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            );
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => contract(op, format!("expected a matrix, got shape {s:?}")),
        }
    }

    /// Applies a tensor-only operation by name.
    pub fn forward_op(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return contract(name, format!("expects {n} inputs, got {}", inputs.len()));
            }
            Ok(())
        };
        if !FORWARD_OPS.contains(&name) {
            return Err(Error::UnsupportedOp(name.to_string()));
        }
        match name {
            "add" | "sub" | "mul" | "matmul" | "concat" | "biased_relu" | "conv2d" => arity(2)?,
            _ => arity(1)?,
        }
        let (a, b) = (inputs[0], inputs.get(1).copied());
        match name {
            "add" => self.add(a, b.unwrap()),
            "sub" => self.sub(a, b.unwrap()),
            "mul" => self.mul(a, b.unwrap()),
            "matmul" => self.matmul(a, b.unwrap()),
            "concat" => self.concat_cols(a, b.unwrap()),
            "biased_relu" => self.biased_relu(a, b.unwrap()),
            "conv2d" => self.conv2d(a, b.unwrap()),
            "transpose" => self.transpose(a),
            "relu" => self.relu(a),
            "tanh" => self.tanh(a),
            "sin" => self.sin(a),
            "cos" => self.cos(a),
            "sum" => self.sum(a),
            "mean" => self.mean(a),
            "l2_norm" => self.l2_norm(a),
            "max_pool2" => self.max_pool2(a),
            _ => unreachable!("filtered above"),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Elementwise power. A zero base with a negative exponent yields 0, which
    /// makes the derivative of `sqrt` and of norms vanish at the origin.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| pow_safe(x, p));
        self.push(v, Op::Pow(a, p), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.pow(a, 0.5)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        Ok(self.push(v, Op::Tanh(a), &[a]))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        Ok(self.push(v, Op::Relu(a), &[a]))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::sin);
        Ok(self.push(v, Op::Sin(a), &[a]))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::cos);
        Ok(self.push(v, Op::Cos(a), &[a]))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return contract("clamp", format!("empty interval [{lo}, {hi}]"));
        }
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        Ok(self.push(v, Op::Clamp(a, lo, hi), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return contract("matmul", format!("[{m}, {k}] x [{k2}, {n}]"));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (d, &yv) in dst.iter_mut().zip(&y[p * n..(p + 1) * n]) {
                    *d += xv * yv;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a]))
    }

    /// Sparse-dense product `matrix * x` for an `n x c` matrix `x`.
    pub fn spmm(&mut self, matrix: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        self.spmm_impl(matrix, false, x)
    }

    /// Sparse-dense product `matrix^T * x`.
    pub fn spmm_transposed(&mut self, matrix: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        self.spmm_impl(matrix, true, x)
    }

    fn spmm_impl(&mut self, matrix: &Arc<SparseMatrix>, transpose: bool, x: Var) -> Result<Var> {
        let (n, c) = self.matrix_dims("spmm", x)?;
        let (rows, inner) = if transpose {
            (matrix.cols(), matrix.rows())
        } else {
            (matrix.rows(), matrix.cols())
        };
        if inner != n {
            return contract(
                "spmm",
                format!("sparse {}x{} (transposed: {transpose}) times [{n}, {c}]", matrix.rows(), matrix.cols()),
            );
        }
        let data = if transpose {
            matrix.transpose_matmul_dense(self.value(x).data(), c)
        } else {
            matrix.matmul_dense(self.value(x).data(), c)
        };
        let op = Op::SpMM {
            matrix: Arc::clone(matrix),
            transpose,
            x,
        };
        Ok(self.push(Tensor::from_parts(vec![rows, c], data), op, &[x]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.matrix_dims("slice_cols", a)?;
        if start >= end || end > c {
            return contract("slice_cols", format!("range {start}..{end} of {c} columns"));
        }
        let w = end - start;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&x[r * c + start..r * c + end]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, w], out),
            Op::SliceCols { x: a, start },
            &[a],
        ))
    }

    /// Embeds a matrix into `width` zero columns starting at `start`.
    pub fn pad_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (n, c) = self.matrix_dims("pad_cols", a)?;
        if start + c > width {
            return contract("pad_cols", format!("{c} columns at {start} exceed width {width}"));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; n * width];
        for r in 0..n {
            out[r * width + start..r * width + start + c].copy_from_slice(&x[r * c..(r + 1) * c]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, width], out),
            Op::PadCols { x: a, start },
            &[a],
        ))
    }

    /// Concatenation along the channel (column) axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.matrix_dims("concat", a)?;
        let (n2, cb) = self.matrix_dims("concat", b)?;
        if n != n2 {
            return contract("concat", format!("row counts {n} and {n2} differ"));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(&x[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&y[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, ca + cb], out),
            Op::ConcatCols(a, b),
            &[a, b],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return contract("mean", "empty tensor");
        }
        let s = self.sum(a)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq)?;
        Ok(self.sqrt(s))
    }

    /// Expands a one-element tensor to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).numel() != 1 {
            return contract("broadcast", format!("source shape {:?} is not a scalar", self.shape(a)));
        }
        let v = Tensor::full(shape, self.value(a).item());
        Ok(self.push(v, Op::Broadcast(a), &[a]))
    }

    /// Column sums of an `n x c` matrix, shape `[c]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.matrix_dims("sum_rows", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&x[r * c..(r + 1) * c]) {
                *o += v;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::SumRows(a), &[a]))
    }

    /// Repeats a `[c]` vector as every row of an `n x c` matrix.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 1 {
            return contract("broadcast_rows", format!("expected a vector, got {:?}", x.shape()));
        }
        let c = x.numel();
        let out: Vec<f64> = (0..n).flat_map(|_| x.data().iter().copied()).collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::BroadcastRows(a), &[a]))
    }

    /// Row sums of an `n x c` matrix, shape `[n]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.matrix_dims("sum_cols", a)?;
        let x = self.value(a).data();
        let out = (0..n).map(|r| x[r * c..(r + 1) * c].iter().sum()).collect();
        Ok(self.push(Tensor::vector(out), Op::SumCols(a), &[a]))
    }

    /// Repeats each entry of an `[n]` vector across `c` columns.
    pub fn broadcast_cols(&mut self, a: Var, c: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 1 {
            return contract("broadcast_cols", format!("expected a vector, got {:?}", x.shape()));
        }
        let n = x.numel();
        let out: Vec<f64> = x.data().iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::BroadcastCols(a), &[a]))
    }

    /// `out.flat[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, idx: &Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let x = self.value(a).data();
        if shape.iter().product::<usize>() != idx.len() {
            return contract("gather", format!("{} indices for shape {shape:?}", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
            return contract("gather", format!("index {bad} out of {} values", x.len()));
        }
        let out = idx.iter().map(|&i| x[i]).collect();
        let op = Op::Gather {
            x: a,
            idx: Arc::clone(idx),
        };
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), op, &[a]))
    }

    /// `out.flat[idx[i]] += x.flat[i]` into zeros of `shape`.
    pub fn scatter_add(&mut self, a: Var, idx: &Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let x = self.value(a).data();
        let len: usize = shape.iter().product();
        if idx.len() != x.len() {
            return contract("scatter_add", format!("{} indices for {} values", idx.len(), x.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return contract("scatter_add", format!("index {bad} out of {len} slots"));
        }
        let mut out = vec![0.0; len];
        for (&i, &v) in idx.iter().zip(x) {
            out[i] += v;
        }
        let op = Op::ScatterAdd {
            x: a,
            idx: Arc::clone(idx),
        };
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), op, &[a]))
    }

    fn conv_dims(&self, x: Var, w: Var) -> Result<(usize, usize, usize, usize, usize)> {
        let (ci, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return contract("conv2d", format!("input must be [C, H, W], got {s:?}")),
        };
        let (co, ci2, k) = match self.shape(w) {
            [o, i, k1, k2] if k1 == k2 && k1 % 2 == 1 => (*o, *i, *k1),
            s => return contract("conv2d", format!("kernel must be [Co, Ci, k, k] with odd k, got {s:?}")),
        };
        if ci != ci2 {
            return contract("conv2d", format!("input has {ci} channels, kernel expects {ci2}"));
        }
        Ok((ci, co, h, wd, k))
    }

    /// Stride-1 "same" convolution of a `[Ci, H, W]` image with a
    /// `[Co, Ci, k, k]` kernel (cross-correlation, zero padding).
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ci, co, h, wd, k) = self.conv_dims(x, w)?;
        let out = conv_forward(self.value(x).data(), self.value(w).data(), ci, co, h, wd, k);
        Ok(self.push(Tensor::from_parts(vec![co, h, wd], out), Op::Conv2d(x, w), &[x, w]))
    }

    /// Adjoint of [`Tape::conv2d`] with respect to its image input.
    pub fn conv2d_input_grad(&mut self, g: Var, w: Var) -> Result<Var> {
        let (co, h, wd) = match self.shape(g) {
            [c, h, w] => (*c, *h, *w),
            s => return contract("conv2d_input_grad", format!("expected [C, H, W], got {s:?}")),
        };
        let (co2, ci, k) = match self.shape(w) {
            [o, i, k, _] => (*o, *i, *k),
            s => return contract("conv2d_input_grad", format!("bad kernel shape {s:?}")),
        };
        if co != co2 {
            return contract("conv2d_input_grad", format!("{co} vs {co2} output channels"));
        }
        let out = conv_input_grad(self.value(g).data(), self.value(w).data(), ci, co, h, wd, k);
        Ok(self.push(
            Tensor::from_parts(vec![ci, h, wd], out),
            Op::Conv2dInputGrad(g, w),
            &[g, w],
        ))
    }

    /// Adjoint of [`Tape::conv2d`] with respect to its kernel.
    pub fn conv2d_weight_grad(&mut self, x: Var, g: Var, k: usize) -> Result<Var> {
        let (ci, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return contract("conv2d_weight_grad", format!("expected [C, H, W], got {s:?}")),
        };
        let co = match self.shape(g) {
            [c, h2, w2] if *h2 == h && *w2 == wd => *c,
            s => return contract("conv2d_weight_grad", format!("gradient shape {s:?} mismatches input")),
        };
        let out = conv_weight_grad(self.value(x).data(), self.value(g).data(), ci, co, h, wd, k);
        Ok(self.push(
            Tensor::from_parts(vec![co, ci, k, k], out),
            Op::Conv2dWeightGrad { x, g },
            &[x, g],
        ))
    }

    /// 2x2 max pooling with stride 2 on a `[C, H, W]` image. Ties route the
    /// gradient to the first maximal element in row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return contract("max_pool2", format!("expected [C, H, W], got {s:?}")),
        };
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return contract("max_pool2", format!("spatial size {h}x{w} is not divisible by 2"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let data = self.value(x).data();
        let mut idx = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    idx.push(best);
                }
            }
        }
        self.gather(x, &Arc::new(idx), &[c, ho, wo])
    }

    /// `relu(x + b)` with `b` broadcast over the rows of `x`.
    pub fn biased_relu(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = self.add_row_bias(x, b)?;
        self.relu(y)
    }

    /// `x + b` for `x: [n, c]`, `b: [c]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c) = self.matrix_dims("add_row_bias", x)?;
        if self.shape(b) != [c] {
            return contract("add_row_bias", format!("bias {:?} for {c} channels", self.shape(b)));
        }
        let bb = self.broadcast_rows(b, n)?;
        self.add(x, bb)
    }

    /// Per-row Euclidean norms of an `n x c` matrix, shape `[n]`.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        let s = self.sum_cols(sq)?;
        Ok(self.sqrt(s))
    }

    /// Scales every row of `x: [n, c]` by the matching entry of `s: [n]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims("scale_rows", x)?;
        let sb = self.broadcast_cols(s, c)?;
        self.mul(x, sb)
    }

    /// Rows of `x` divided by their norms; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        let s = self.sum_cols(sq)?;
        let inv = self.pow(s, -0.5);
        self.scale_rows(x, inv)
    }

    /// Registers a custom operation whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Arc<dyn CustomOp>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar `loss`; returns the gradients of every
    /// differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_scalar(loss)?;
        let seed = self.constant(Tensor::full(self.shape(loss), 1.0));
        let grads = self.propagate(loss, seed, false)?;
        let mut map = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                if self.nodes[i].requires_grad {
                    map.insert(Var(i), self.value(g).clone());
                }
            }
        }
        Ok(Gradients { map })
    }

    /// Gradients of a scalar `output` with respect to `wrt`. With
    /// `create_graph` the returned handles are themselves differentiable.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        self.check_scalar(output)?;
        let seed = self.constant(Tensor::full(self.shape(output), 1.0));
        let grads = self.propagate(output, seed, create_graph)?;
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match grads.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let z = Tensor::zeros(self.shape(w));
                    out.push(self.constant(z));
                }
            }
        }
        Ok(out)
    }

    fn check_scalar(&self, v: Var) -> Result<()> {
        if self.value(v).numel() != 1 {
            return contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(v)),
            );
        }
        Ok(())
    }

    fn propagate(&mut self, output: Var, seed: Var, create_graph: bool) -> Result<Vec<Option<Var>>> {
        let saved = self.recording;
        self.recording = create_graph && self.enabled;
        let result = self.propagate_inner(output, seed, create_graph);
        self.recording = saved;
        result
    }

    fn propagate_inner(&mut self, output: Var, seed: Var, create_graph: bool) -> Result<Vec<Option<Var>>> {
        let mut grads: Vec<Option<Var>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if create_graph {
                if let Op::Custom { op: custom, .. } = &op {
                    return contract(
                        custom.name(),
                        "second-order differentiation is not available for this operation",
                    );
                }
            }
            let mut contribs = self.vjp(&op, Var(i), g)?;
            if let Some(fault) = self.fault.clone() {
                if fault.op == op.name() {
                    for (_, gi) in contribs.iter_mut() {
                        *gi = self.scale(*gi, fault.factor);
                    }
                }
            }
            for (input, gi) in contribs {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(prev) => self.add(prev, gi)?,
                    None => gi,
                });
            }
        }
        Ok(grads)
    }

    fn mask(&mut self, x: Var, keep: impl Fn(f64) -> bool) -> Var {
        let m = self.value(x).map(|v| if keep(v) { 1.0 } else { 0.0 });
        self.constant(m)
    }

    fn vjp(&mut self, op: &Op, out: Var, g: Var) -> Result<Vec<(Var, Var)>> {
        Ok(match op {
            Op::Const | Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => {
                let nb = self.neg(g);
                vec![(*a, g), (*b, nb)]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, *b)?;
                let gb = self.mul(g, *a)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, self.scale(g, *f))],
            Op::AddScalar(a) => vec![(*a, g)],
            Op::Pow(a, p) => {
                let d = self.pow(*a, p - 1.0);
                let d = self.scale(d, *p);
                vec![(*a, self.mul(g, d)?)]
            }
            Op::Tanh(a) => {
                let y2 = self.mul(out, out)?;
                let one_minus = self.neg(y2);
                let one_minus = self.add_scalar(one_minus, 1.0);
                vec![(*a, self.mul(g, one_minus)?)]
            }
            Op::Relu(a) => {
                let m = self.mask(*a, |v| v > 0.0);
                vec![(*a, self.mul(g, m)?)]
            }
            Op::Sin(a) => {
                let c = self.cos(*a)?;
                vec![(*a, self.mul(g, c)?)]
            }
            Op::Cos(a) => {
                let s = self.sin(*a)?;
                let s = self.neg(s);
                vec![(*a, self.mul(g, s)?)]
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let m = self.mask(*a, |v| v >= lo && v <= hi);
                vec![(*a, self.mul(g, m)?)]
            }
            Op::MatMul(a, b) => {
                let bt = self.transpose(*b)?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(*a)?;
                let gb = self.matmul(at, g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, self.transpose(g)?)],
            Op::SpMM {
                matrix,
                transpose,
                x,
            } => vec![(*x, self.spmm_impl(matrix, !transpose, g)?)],
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                vec![(*a, self.reshape(g, &shape)?)]
            }
            Op::SliceCols { x, start } => {
                let width = self.shape(*x)[1];
                vec![(*x, self.pad_cols(g, *start, width)?)]
            }
            Op::PadCols { x, start, .. } => {
                let c = self.shape(*x)[1];
                vec![(*x, self.slice_cols(g, *start, start + c)?)]
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let total = self.shape(out)[1];
                let ga = self.slice_cols(g, 0, ca)?;
                let gb = self.slice_cols(g, ca, total)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                vec![(*a, self.broadcast(g, &shape)?)]
            }
            Op::Broadcast(a) => {
                let s = self.sum(g)?;
                let shape = self.shape(*a).to_vec();
                vec![(*a, self.reshape(s, &shape)?)]
            }
            Op::SumRows(a) => {
                let n = self.shape(*a)[0];
                vec![(*a, self.broadcast_rows(g, n)?)]
            }
            Op::BroadcastRows(a) => vec![(*a, self.sum_rows(g)?)],
            Op::SumCols(a) => {
                let c = self.shape(*a)[1];
                vec![(*a, self.broadcast_cols(g, c)?)]
            }
            Op::BroadcastCols(a) => vec![(*a, self.sum_cols(g)?)],
            Op::Gather { x, idx } => {
                let shape = self.shape(*x).to_vec();
                vec![(*x, self.scatter_add(g, idx, &shape)?)]
            }
            Op::ScatterAdd { x, idx } => {
                let shape = self.shape(*x).to_vec();
                vec![(*x, self.gather(g, idx, &shape)?)]
            }
            Op::Conv2d(x, w) => {
                let k = self.shape(*w)[2];
                let gx = self.conv2d_input_grad(g, *w)?;
                let gw = self.conv2d_weight_grad(*x, g, k)?;
                vec![(*x, gx), (*w, gw)]
            }
            Op::Conv2dInputGrad(g0, w) => {
                let k = self.shape(*w)[2];
                let d_g0 = self.conv2d(g, *w)?;
                let d_w = self.conv2d_weight_grad(g, *g0, k)?;
                vec![(*g0, d_g0), (*w, d_w)]
            }
            Op::Conv2dWeightGrad { x, g: g0 } => {
                let d_x = self.conv2d_input_grad(*g0, g)?;
                let d_g0 = self.conv2d(*x, g)?;
                vec![(*x, d_x), (*g0, d_g0)]
            }
            Op::Custom { inputs, op } => {
                let grads = {
                    let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    op.vjp(&vals, self.value(out), self.value(g))
                };
                let mut res = Vec::new();
                for (input, gi) in inputs.iter().zip(grads) {
                    if let Some(t) = gi {
                        res.push((*input, self.constant(t)));
                    }
                }
                res
            }
        })
    }
}

fn pow_safe(x: f64, p: f64) -> f64 {
    if x == 0.0 && p < 0.0 {
        0.0
    } else {
        x.powf(p)
    }
}

fn conv_forward(x: &[f64], w: &[f64], ci: usize, co: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; co * h * wd];
    let pad = (k / 2) as isize;
    for o in 0..co {
        let dst = &mut out[o * h * wd..(o + 1) * h * wd];
        for i in 0..ci {
            let src = &x[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wv = w[((o * ci + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(dx, wd);
                    let (y0, y1) = valid_range(dy, h);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let drow = &mut dst[y * wd + x0..y * wd + x1];
                        let srow = &src[sy * wd + (x0 as isize + dx) as usize..];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_input_grad(g: &[f64], w: &[f64], ci: usize, co: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; ci * h * wd];
    let pad = (k / 2) as isize;
    for o in 0..co {
        let src = &g[o * h * wd..(o + 1) * h * wd];
        for i in 0..ci {
            let dst = &mut out[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wv = w[((o * ci + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(dx, wd);
                    let (y0, y1) = valid_range(dy, h);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let off = (x0 as isize + dx) as usize;
                        let drow = &mut dst[sy * wd + off..sy * wd + off + (x1 - x0)];
                        let srow = &src[y * wd + x0..y * wd + x1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_weight_grad(x: &[f64], g: &[f64], ci: usize, co: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; co * ci * k * k];
    let pad = (k / 2) as isize;
    for o in 0..co {
        let gsrc = &g[o * h * wd..(o + 1) * h * wd];
        for i in 0..ci {
            let xsrc = &x[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, wd);
                    let (y0, y1) = valid_range(dy, h);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let off = (x0 as isize + dx) as usize;
                        let grow = &gsrc[y * wd + x0..y * wd + x1];
                        let xrow = &xsrc[sy * wd + off..];
                        acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    out[((o * ci + i) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    out
}

/// Output positions `p` with `p + d` inside `0..len`.
fn valid_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}
