//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation whose inputs are tape-attached; calling
//! [`Tape::backward`] on a scalar replays the record in reverse and accumulates
//! vector-Jacobian products into per-node gradient buffers. Tensors created
//! with [`DiffTensor::constant`] never enter the record and never receive
//! gradient, which is how direction vectors and teacher outputs are kept
//! frozen inside loss graphs.
//!
//! The op set is deliberately small: dense matmul, elementwise arithmetic,
//! ReLU, row softmax, clamped log, axis means, sums, norms, dot products,
//! scalar scaling and per-column batch standardization. No broadcasting
//! beyond row-vector addition, no views, no convolutions.
//!
//! All storage is `f64` and every op checks its output for NaN/Inf; a
//! non-finite intermediate is a contract violation reported as an error, not
//! a value that silently propagates.

mod record;

pub use record::Gradients;

use crate::error::{CttaError, Result};
use record::{Node, Op, Src};

/// Floor applied inside [`Tape::ln_clamped`] so that log of a one-hot
/// probability row stays finite. Part of the loss contract.
pub const LOG_FLOOR: f64 = 1e-12;

/// Epsilon added to the batch standard deviation in [`Tape::standardize`].
pub const STANDARDIZE_EPSILON: f64 = 1e-5;

/// Dense tensor participating in a recorded computation.
///
/// `shape` is 1- or 2-dimensional, `values` row-major. `node` is `Some` when
/// the tensor was produced by (or registered as a leaf of) an active tape.
#[derive(Debug, Clone)]
pub struct DiffTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    node: Option<usize>,
}

impl DiffTensor {
    /// A tensor outside any tape. Constants receive no gradient.
    pub fn constant(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        validate_shape("constant", &values, shape)?;
        ensure_finite("constant", &values)?;
        Ok(DiffTensor { shape: shape.to_vec(), values, node: None })
    }

    /// Constant column/row vector.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        DiffTensor::constant(values, &[n])
    }

    /// Constant matrix from nested rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CttaError::invalid("matrix", "no rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CttaError::shape("matrix", "ragged rows"));
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            values.extend_from_slice(r);
        }
        DiffTensor::constant(values, &[rows.len(), cols])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Scalar value; panics if the tensor is not a scalar (internal use after
    /// an explicit `is_scalar` check or a scalar-producing op).
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Same storage and tape identity under a new shape with equal length.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        validate_shape("reshape", &self.values, shape)?;
        Ok(DiffTensor { shape: shape.to_vec(), values: self.values.clone(), node: self.node })
    }

    /// Value copy detached from any tape.
    pub fn detached(&self) -> Self {
        DiffTensor { shape: self.shape.clone(), values: self.values.clone(), node: None }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.len() {
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(CttaError::shape(op, format!("expected matrix, got shape {:?}", self.shape))),
        }
    }

    /// Rows/cols with a 1-D tensor treated as a single row.
    fn as_rows(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }
}

fn validate_shape(op: &'static str, values: &[f64], shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(CttaError::shape(op, format!("rank {} unsupported", shape.len())));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(CttaError::shape(op, "zero-sized dimension"));
    }
    let numel: usize = shape.iter().product();
    if numel != values.len() {
        return Err(CttaError::shape(
            op,
            format!("shape {:?} implies {} values, got {}", shape, numel, values.len()),
        ));
    }
    Ok(())
}

fn ensure_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CttaError::NonFinite { op })
    }
}

/// Operation record for one differentiable computation.
///
/// Single-threaded by design; independent tapes may run concurrently.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a gradient-receiving leaf.
    pub fn leaf(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<DiffTensor> {
        validate_shape("leaf", &values, shape)?;
        ensure_finite("leaf", &values)?;
        let node = self.push_node(Op::Leaf, values.clone());
        Ok(DiffTensor { shape: shape.to_vec(), values, node: Some(node) })
    }

    fn push_node(&mut self, op: Op, out: Vec<f64>) -> usize {
        self.nodes.push(Node { op, out });
        self.nodes.len() - 1
    }

    fn src(t: &DiffTensor) -> Src {
        Src { node: t.node, values: t.values.clone() }
    }

    /// Record `op` with output `values` if any input is attached; otherwise
    /// return a constant.
    fn emit(
        &mut self,
        name: &'static str,
        op: Op,
        values: Vec<f64>,
        shape: Vec<usize>,
        attached: bool,
    ) -> Result<DiffTensor> {
        ensure_finite(name, &values)?;
        let node = if attached { Some(self.push_node(op, values.clone())) } else { None };
        Ok(DiffTensor { shape, values, node })
    }

    /// Dense matrix product of `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        let (m, ka) = a.dims2("matmul")?;
        let (kb, n) = b.dims2("matmul")?;
        if ka != kb {
            return Err(CttaError::shape(
                "matmul",
                format!("inner dimensions {} vs {}", ka, kb),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..ka {
                let aip = a.values[i * ka + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * b.values[p * n + j];
                }
            }
        }
        let attached = a.node.is_some() || b.node.is_some();
        let op = Op::MatMul { a: Self::src(a), b: Self::src(b), m, k: ka, n };
        self.emit("matmul", op, out, vec![m, n], attached)
    }

    fn zip_elementwise(
        &mut self,
        name: &'static str,
        a: &DiffTensor,
        b: &DiffTensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Src, Src) -> Op,
    ) -> Result<DiffTensor> {
        if a.shape != b.shape {
            return Err(CttaError::shape(
                name,
                format!("{:?} vs {:?}", a.shape, b.shape),
            ));
        }
        let out: Vec<f64> = a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect();
        let attached = a.node.is_some() || b.node.is_some();
        let op = op(Self::src(a), Self::src(b));
        self.emit(name, op, out, a.shape.clone(), attached)
    }

    pub fn add(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.zip_elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.zip_elementwise("div", a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    /// Add a length-`c` vector to every row of an `[r,c]` matrix.
    pub fn add_row(&mut self, x: &DiffTensor, v: &DiffTensor) -> Result<DiffTensor> {
        let (r, c) = x.dims2("add_row")?;
        if v.numel() != c {
            return Err(CttaError::shape(
                "add_row",
                format!("row vector length {} vs {} columns", v.numel(), c),
            ));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(x.values[i * c + j] + v.values[j]);
            }
        }
        let attached = x.node.is_some() || v.node.is_some();
        let op = Op::AddRow { x: Self::src(x), v: Self::src(v), rows: r, cols: c };
        self.emit("add_row", op, out, vec![r, c], attached)
    }

    pub fn relu(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let out: Vec<f64> = x.values.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let op = Op::Relu { x: Self::src(x) };
        self.emit("relu", op, out, x.shape.clone(), x.node.is_some())
    }

    pub fn abs(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let out: Vec<f64> = x.values.iter().map(|v| v.abs()).collect();
        let op = Op::Abs { x: Self::src(x) };
        self.emit("abs", op, out, x.shape.clone(), x.node.is_some())
    }

    /// Numerically stable softmax over each row; a 1-D input is one row.
    pub fn softmax_rows(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let (rows, cols) = x.as_rows();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x.values[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                out[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        let op = Op::SoftmaxRows { x: Self::src(x), rows, cols };
        self.emit("softmax", op, out, x.shape.clone(), x.node.is_some())
    }

    /// Natural log with inputs clamped below at [`LOG_FLOOR`]. Values in the
    /// clamped region carry zero gradient.
    pub fn ln_clamped(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let out: Vec<f64> = x.values.iter().map(|&v| v.max(LOG_FLOOR).ln()).collect();
        let op = Op::LnClamped { x: Self::src(x) };
        self.emit("ln_clamped", op, out, x.shape.clone(), x.node.is_some())
    }

    /// Mean over `axis` of a matrix (0 = over rows, 1 = over columns), or the
    /// scalar mean of a vector with `axis == 0`.
    pub fn mean_axis(&mut self, x: &DiffTensor, axis: usize) -> Result<DiffTensor> {
        match (x.shape.len(), axis) {
            (1, 0) => {
                let n = x.numel();
                let mean = x.values.iter().sum::<f64>() / n as f64;
                let op = Op::MeanAxis { x: Self::src(x), rows: 1, cols: n, axis: 1 };
                self.emit("mean_axis", op, vec![mean], vec![1], x.node.is_some())
            }
            (2, 0) => {
                let (r, c) = (x.shape[0], x.shape[1]);
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += x.values[i * c + j];
                    }
                }
                for v in &mut out {
                    *v /= r as f64;
                }
                let op = Op::MeanAxis { x: Self::src(x), rows: r, cols: c, axis: 0 };
                self.emit("mean_axis", op, out, vec![c], x.node.is_some())
            }
            (2, 1) => {
                let (r, c) = (x.shape[0], x.shape[1]);
                let mut out = vec![0.0; r];
                for i in 0..r {
                    out[i] = x.values[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
                }
                let op = Op::MeanAxis { x: Self::src(x), rows: r, cols: c, axis: 1 };
                self.emit("mean_axis", op, out, vec![r], x.node.is_some())
            }
            _ => Err(CttaError::shape(
                "mean_axis",
                format!("axis {} on shape {:?}", axis, x.shape),
            )),
        }
    }

    /// Sum of all entries as a scalar.
    pub fn sum_all(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let sum = x.values.iter().sum::<f64>();
        let op = Op::SumAll { x: Self::src(x) };
        self.emit("sum_all", op, vec![sum], vec![1], x.node.is_some())
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2_norm(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let norm = x.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let op = Op::L2Norm { x: Self::src(x) };
        self.emit("l2_norm", op, vec![norm], vec![1], x.node.is_some())
    }

    /// Euclidean norm of each row of an `[r,c]` matrix.
    pub fn row_l2_norms(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let (r, c) = x.dims2("row_l2_norms")?;
        let out: Vec<f64> = (0..r)
            .map(|i| x.values[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let op = Op::RowL2Norms { x: Self::src(x), rows: r, cols: c };
        self.emit("row_l2_norms", op, out, vec![r], x.node.is_some())
    }

    /// Dot product of two equal-length tensors, flattened.
    pub fn dot(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        if a.numel() != b.numel() {
            return Err(CttaError::shape(
                "dot",
                format!("lengths {} vs {}", a.numel(), b.numel()),
            ));
        }
        let out = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>();
        let attached = a.node.is_some() || b.node.is_some();
        let op = Op::Dot { a: Self::src(a), b: Self::src(b) };
        self.emit("dot", op, vec![out], vec![1], attached)
    }

    /// Multiply by a compile-time-constant scalar.
    pub fn scale(&mut self, x: &DiffTensor, c: f64) -> Result<DiffTensor> {
        if !c.is_finite() {
            return Err(CttaError::NonFinite { op: "scale" });
        }
        let out: Vec<f64> = x.values.iter().map(|v| v * c).collect();
        let op = Op::Scale { x: Self::src(x), c };
        self.emit("scale", op, out, x.shape.clone(), x.node.is_some())
    }

    /// Per-column batch standardization of an `[r,c]` matrix: subtract the
    /// column mean, divide by the column standard deviation plus
    /// [`STANDARDIZE_EPSILON`].
    pub fn standardize(&mut self, x: &DiffTensor) -> Result<DiffTensor> {
        let (r, c) = x.dims2("standardize")?;
        let stats = column_stats(&x.values, r, c);
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let denom = stats.std[j] + STANDARDIZE_EPSILON;
            for i in 0..r {
                out[i * c + j] = (x.values[i * c + j] - stats.mean[j]) / denom;
            }
        }
        let op = Op::Standardize { x: Self::src(x), rows: r, cols: c };
        self.emit("standardize", op, out, vec![r, c], x.node.is_some())
    }

    /// Reverse sweep from a scalar loss. Every recorded node is visited
    /// exactly once, in reverse topological (= reverse insertion) order.
    pub fn backward(&self, loss: &DiffTensor) -> Result<Gradients> {
        let node = loss.node.ok_or_else(|| {
            CttaError::invalid("backward", "loss is not attached to this tape")
        })?;
        if !loss.is_scalar() {
            return Err(CttaError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape),
            ));
        }
        if node >= self.nodes.len() {
            return Err(CttaError::invalid("backward", "loss node out of range"));
        }
        record::backward(&self.nodes, node)
    }
}

/// Per-column mean and (population) standard deviation of a row-major matrix.
pub(crate) struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub(crate) fn column_stats(values: &[f64], rows: usize, cols: usize) -> ColumnStats {
    let mut mean = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            mean[j] += values[i * cols + j];
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            let d = values[i * cols + j] - mean[j];
            var[j] += d * d;
        }
    }
    let std = var.iter().map(|v| (v / rows as f64).sqrt()).collect();
    ColumnStats { mean, std }
}

/// Tape-recorded finite-difference probe of a head function along a frozen
/// direction: `(h(z + eps*v) - h(z)) / eps`, one directional derivative per
/// output coordinate. The expression is itself differentiable with respect to
/// whatever leaves `head` touches (its parameters) and to `z`; `v` enters as
/// a constant. For a head linear in `z` the probe equals the exact
/// Jacobian-vector product for every `eps`.
pub fn jvp_probe<F>(
    tape: &mut Tape,
    head: F,
    z: &DiffTensor,
    v: &[f64],
    epsilon: f64,
) -> Result<DiffTensor>
where
    F: Fn(&mut Tape, &DiffTensor) -> Result<DiffTensor>,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(CttaError::invalid("jvp_probe", format!("epsilon {} must be > 0", epsilon)));
    }
    let (rows, cols) = z.as_rows();
    if v.len() != cols {
        return Err(CttaError::shape(
            "jvp_probe",
            format!("direction length {} vs feature dimension {}", v.len(), cols),
        ));
    }
    let mut step = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        step.extend(v.iter().map(|x| x * epsilon));
    }
    let step = DiffTensor::constant(step, z.shape())?;
    let shifted = tape.add(z, &step)?;
    let base = head(tape, z)?;
    let moved = head(tape, &shifted)?;
    if base.shape() != moved.shape() {
        return Err(CttaError::shape(
            "jvp_probe",
            "head output shape changed under perturbation",
        ));
    }
    let diff = tape.sub(&moved, &base)?;
    tape.scale(&diff, 1.0 / epsilon)
}
