//! Dense 2-D tensors with reverse-mode differentiation and Adam.
//!
//! The graph is a tape: forward calls record one node per operation, and
//! [`Tape::backward`] replays the records in reverse. No graph rewriting,
//! no broadcasting beyond the row-bias case `[r x c] + [1 x c]`, no views;
//! every operation allocates its output. That is deliberate: the tensors
//! in this pipeline top out around 120 x 512.
//!
//! Precision is generic over [`Scalar`] (`f32` or `f64`). Gradient checks
//! hold to 1e-4 relative error in f64 (central differences, step 1e-5);
//! f32 forward values track f64 to ~1e-5 relative and its gradients to
//! ~1e-3, which is adequate for training but not for verification.

pub mod checkpoint;

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use thiserror::Error;

use crate::rng::SeededRng;

/// Element type for tensors: `f32` or `f64`.
pub trait Scalar: num_traits::Float + core::fmt::Debug + 'static {
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: axis {axis} out of range for a 2-d tensor")]
    BadAxis { op: &'static str, axis: usize },
    #[error("{op}: range {start}..{end} exceeds extent {extent} on axis {axis}")]
    BadRange { op: &'static str, axis: usize, start: usize, end: usize, extent: usize },
    #[error("data length {got} does not match shape {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, got: usize },
    #[error("tensor dimensions must be nonzero, got {rows}x{cols}")]
    EmptyTensor { rows: usize, cols: usize },
    #[error("backward requires a scalar loss, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("concat requires at least one input")]
    EmptyConcat,
    #[error("adam_step: {params} parameters but {grads} gradients")]
    CountMismatch { params: usize, grads: usize },
}

/// Dense row-major matrix. Vectors are `1 x n` or `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, AutodiffError> {
        if rows == 0 || cols == 0 {
            return Err(AutodiffError::EmptyTensor { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(AutodiffError::LengthMismatch { rows, cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be nonzero");
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be nonzero");
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| T::from_f64(std * rng.normal())).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// The single element of a 1x1 tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn transposed(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn add_in_place(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

fn matmul_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Tensor::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        for k in 0..a.cols {
            let av = a.data[r * a.cols + k];
            if av == T::zero() {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[r * b.cols..(r + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

enum Op<T> {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    /// `[r x c] + [1 x c]`: the bias row is added to every row.
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Transpose(usize),
    Mean(usize),
    Sum(usize),
    LayerNorm(usize),
    SoftmaxRows(usize),
    Gelu(usize),
    Relu(usize),
    L1Loss(usize, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Value`].
/// Every leaf has an entry (zero if the loss does not depend on it);
/// interior nodes the loss never reached may be absent.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Value) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Value) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Records operations as they execute so [`Tape::backward`] can replay
/// them in reverse. Confined to one thread; build one per training step.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tanh-form GELU and its exact derivative.
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let c3 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = k * (x + c3 * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let k = T::from_f64(0.7978845608028654);
    let c3 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = k * (x + c3 * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + three * c3 * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Value(nodes.len() - 1)
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Clone of the forward value at `v`.
    pub fn value(&self, v: Value) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn leaf(&self, t: Tensor<T>) -> Value {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: va.shape(), rhs: vb.shape() });
        }
        Ok(self.push(matmul_values(&va, &vb), Op::Matmul(a.0, b.0)))
    }

    /// Elementwise addition, or row-broadcast when `b` is `1 x cols(a)`.
    pub fn add(&self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let mut out = va;
            out.add_in_place(&vb);
            return Ok(self.push(out, Op::Add(a.0, b.0)));
        }
        if vb.rows == 1 && vb.cols == va.cols {
            let mut out = va;
            for r in 0..out.rows {
                for c in 0..out.cols {
                    out.data[r * out.cols + c] = out.data[r * out.cols + c] + vb.data[c];
                }
            }
            return Ok(self.push(out, Op::AddRow(a.0, b.0)));
        }
        Err(AutodiffError::ShapeMismatch { op: "add", lhs: va.shape(), rhs: vb.shape() })
    }

    pub fn sub(&self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        let neg = self.scale(b, T::from_f64(-1.0));
        self.add(a, neg)
    }

    pub fn mul(&self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(AutodiffError::ShapeMismatch { op: "mul", lhs: va.shape(), rhs: vb.shape() });
        }
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let out = Tensor { rows: va.rows, cols: va.cols, data };
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&self, a: Value, factor: T) -> Value {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a.0, factor))
    }

    pub fn concat(&self, inputs: &[Value], axis: usize) -> Result<Value, AutodiffError> {
        if inputs.is_empty() {
            return Err(AutodiffError::EmptyConcat);
        }
        if axis > 1 {
            return Err(AutodiffError::BadAxis { op: "concat", axis });
        }
        let first = self.value(inputs[0]);
        let mut rows = first.rows;
        let mut cols = first.cols;
        for &v in &inputs[1..] {
            let t = self.value(v);
            let compatible = if axis == 0 { t.cols == cols } else { t.rows == rows };
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: (rows, cols),
                    rhs: t.shape(),
                });
            }
            if axis == 0 {
                rows += t.rows;
            } else {
                cols += t.cols;
            }
        }
        let mut out = Tensor::zeros(rows, cols);
        if axis == 0 {
            let mut row = 0;
            for &v in inputs {
                let t = self.value(v);
                out.data[row * cols..(row + t.rows) * cols].copy_from_slice(&t.data);
                row += t.rows;
            }
        } else {
            let mut col = 0;
            for &v in inputs {
                let t = self.value(v);
                for r in 0..rows {
                    out.data[r * cols + col..r * cols + col + t.cols]
                        .copy_from_slice(&t.data[r * t.cols..(r + 1) * t.cols]);
                }
                col += t.cols;
            }
        }
        Ok(self.push(out, Op::Concat(inputs.iter().map(|v| v.0).collect(), axis)))
    }

    pub fn slice(&self, a: Value, axis: usize, start: usize, len: usize) -> Result<Value, AutodiffError> {
        if axis > 1 {
            return Err(AutodiffError::BadAxis { op: "slice", axis });
        }
        let va = self.value(a);
        let extent = if axis == 0 { va.rows } else { va.cols };
        if len == 0 || start + len > extent {
            return Err(AutodiffError::BadRange { op: "slice", axis, start, end: start + len, extent });
        }
        let out = if axis == 0 {
            Tensor {
                rows: len,
                cols: va.cols,
                data: va.data[start * va.cols..(start + len) * va.cols].to_vec(),
            }
        } else {
            let mut o = Tensor::zeros(va.rows, len);
            for r in 0..va.rows {
                o.data[r * len..(r + 1) * len]
                    .copy_from_slice(&va.data[r * va.cols + start..r * va.cols + start + len]);
            }
            o
        };
        Ok(self.push(out, Op::Slice { input: a.0, axis, start }))
    }

    pub fn transpose(&self, a: Value) -> Value {
        let out = self.value(a).transposed();
        self.push(out, Op::Transpose(a.0))
    }

    /// Mean over all elements; yields a 1x1 tensor.
    pub fn mean(&self, a: Value) -> Value {
        let va = self.value(a);
        let n = T::from_f64(va.data.len() as f64);
        let total = va.data.iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(total / n), Op::Mean(a.0))
    }

    /// Sum over all elements; yields a 1x1 tensor.
    pub fn sum(&self, a: Value) -> Value {
        let va = self.value(a);
        let total = va.data.iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(total), Op::Sum(a.0))
    }

    /// Row-wise normalization to zero mean and unit variance (epsilon
    /// 1e-5, no learned affine).
    pub fn layer_norm(&self, a: Value) -> Value {
        let va = self.value(a);
        let out = layer_norm_values(&va);
        self.push(out, Op::LayerNorm(a.0))
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&self, a: Value, axis: usize) -> Result<Value, AutodiffError> {
        match axis {
            1 => {
                let out = softmax_rows_values(&self.value(a));
                Ok(self.push(out, Op::SoftmaxRows(a.0)))
            }
            0 => {
                // Composite: the tape differentiates through the transposes.
                let t = self.transpose(a);
                let s = self.push(softmax_rows_values(&self.value(t)), Op::SoftmaxRows(t.0));
                Ok(self.transpose(s))
            }
            axis => Err(AutodiffError::BadAxis { op: "softmax", axis }),
        }
    }

    pub fn gelu(&self, a: Value) -> Value {
        let out = self.value(a).map(gelu_scalar);
        self.push(out, Op::Gelu(a.0))
    }

    pub fn relu(&self, a: Value) -> Value {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a.0))
    }

    /// `x.w + b` with `b` broadcast across rows.
    pub fn linear(&self, x: Value, w: Value, b: Value) -> Result<Value, AutodiffError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Mean absolute difference; yields a 1x1 tensor.
    pub fn l1_loss(&self, pred: Value, target: Value) -> Result<Value, AutodiffError> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(AutodiffError::ShapeMismatch { op: "l1_loss", lhs: vp.shape(), rhs: vt.shape() });
        }
        let n = T::from_f64(vp.data.len() as f64);
        let total = vp
            .data
            .iter()
            .zip(&vt.data)
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t).abs());
        Ok(self.push(Tensor::scalar(total / n), Op::L1Loss(pred.0, target.0)))
    }

    /// Reverse-mode gradients of a scalar loss with respect to every node.
    /// Leaves the loss never touched come back as zeros.
    pub fn backward(&self, loss: Value) -> Result<Gradients<T>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.data.len() != 1 {
            return Err(AutodiffError::NonScalarLoss { rows: loss_shape.0, cols: loss_shape.1 });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            // Inputs always precede their consumer, so splitting at `id`
            // gives disjoint access to the output grad and input slots.
            let (input_grads, rest) = grads.split_at_mut(id);
            let g = rest[0].as_ref().expect("checked above").clone();
            let mut accumulate = |input: usize, delta: Tensor<T>| {
                match &mut input_grads[input] {
                    Some(existing) => existing.add_in_place(&delta),
                    slot => *slot = Some(delta),
                }
            };
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    accumulate(*a, matmul_values(&g, &vb.transposed()));
                    accumulate(*b, matmul_values(&va.transposed(), &g));
                }
                Op::Add(a, b) => {
                    accumulate(*a, g.clone());
                    accumulate(*b, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] = gb.data[c] + g.data[r * g.cols + c];
                        }
                    }
                    accumulate(*a, g);
                    accumulate(*b, gb);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&vb.data).map(|(&gx, &y)| gx * y).collect(),
                    };
                    let gb = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&va.data).map(|(&gx, &x)| gx * x).collect(),
                    };
                    accumulate(*a, ga);
                    accumulate(*b, gb);
                }
                Op::Scale(a, factor) => {
                    accumulate(*a, g.map(|x| x * *factor));
                }
                Op::Concat(inputs, axis) => {
                    let mut offset = 0;
                    for &input in inputs {
                        let shape = nodes[input].value.shape();
                        let part = if *axis == 0 {
                            let d = Tensor {
                                rows: shape.0,
                                cols: g.cols,
                                data: g.data[offset * g.cols..(offset + shape.0) * g.cols].to_vec(),
                            };
                            offset += shape.0;
                            d
                        } else {
                            let mut d = Tensor::zeros(g.rows, shape.1);
                            for r in 0..g.rows {
                                d.data[r * shape.1..(r + 1) * shape.1].copy_from_slice(
                                    &g.data[r * g.cols + offset..r * g.cols + offset + shape.1],
                                );
                            }
                            offset += shape.1;
                            d
                        };
                        accumulate(input, part);
                    }
                }
                Op::Slice { input, axis, start } => {
                    let shape = nodes[*input].value.shape();
                    let mut d = Tensor::zeros(shape.0, shape.1);
                    if *axis == 0 {
                        d.data[start * shape.1..(start + g.rows) * shape.1].copy_from_slice(&g.data);
                    } else {
                        for r in 0..g.rows {
                            d.data[r * shape.1 + start..r * shape.1 + start + g.cols]
                                .copy_from_slice(&g.data[r * g.cols..(r + 1) * g.cols]);
                        }
                    }
                    accumulate(*input, d);
                }
                Op::Transpose(a) => {
                    accumulate(*a, g.transposed());
                }
                Op::Mean(a) => {
                    let shape = nodes[*a].value.shape();
                    let per = g.item() / T::from_f64((shape.0 * shape.1) as f64);
                    accumulate(*a, Tensor::filled(shape.0, shape.1, per));
                }
                Op::Sum(a) => {
                    let shape = nodes[*a].value.shape();
                    accumulate(*a, Tensor::filled(shape.0, shape.1, g.item()));
                }
                Op::LayerNorm(a) => {
                    accumulate(*a, layer_norm_backward(&nodes[*a].value, &nodes[id].value, &g));
                }
                Op::SoftmaxRows(a) => {
                    let y = &nodes[id].value;
                    let mut d = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = &y.data[r * y.cols..(r + 1) * y.cols];
                        let gr = &g.data[r * y.cols..(r + 1) * y.cols];
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for c in 0..y.cols {
                            d.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(*a, d);
                }
                Op::Gelu(a) => {
                    let va = &nodes[*a].value;
                    let d = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&va.data)
                            .map(|(&gx, &x)| gx * gelu_derivative(x))
                            .collect(),
                    };
                    accumulate(*a, d);
                }
                Op::Relu(a) => {
                    let va = &nodes[*a].value;
                    let d = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&va.data)
                            .map(|(&gx, &x)| if x > T::zero() { gx } else { T::zero() })
                            .collect(),
                    };
                    accumulate(*a, d);
                }
                Op::L1Loss(p, t) => {
                    let (vp, vt) = (&nodes[*p].value, &nodes[*t].value);
                    let per = g.item() / T::from_f64(vp.data.len() as f64);
                    let signs: Vec<T> = vp
                        .data
                        .iter()
                        .zip(&vt.data)
                        .map(|(&pv, &tv)| {
                            if pv > tv {
                                per
                            } else if pv < tv {
                                -per
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    let gp = Tensor { rows: vp.rows, cols: vp.cols, data: signs.clone() };
                    let gt = Tensor {
                        rows: vp.rows,
                        cols: vp.cols,
                        data: signs.iter().map(|&s| -s).collect(),
                    };
                    accumulate(*p, gp);
                    accumulate(*t, gt);
                }
            }
        }
        // Untouched leaves report zero, so callers can index unconditionally.
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.rows, node.value.cols));
            }
        }
        Ok(Gradients { grads })
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn layer_norm_values<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let n = T::from_f64(x.cols as f64);
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = &x.data[r * x.cols..(r + 1) * x.cols];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let s = T::one() / (var + eps).sqrt();
        for c in 0..x.cols {
            out.data[r * x.cols + c] = (row[c] - mean) * s;
        }
    }
    out
}

/// dx = s * (g - mean(g) - y * mean(g * y)), per row, where s is the
/// row's inverse standard deviation and y the normalized output.
fn layer_norm_backward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let n = T::from_f64(x.cols as f64);
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let xr = &x.data[r * x.cols..(r + 1) * x.cols];
        let yr = &y.data[r * x.cols..(r + 1) * x.cols];
        let gr = &g.data[r * x.cols..(r + 1) * x.cols];
        let mean = xr.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let s = T::one() / (var + eps).sqrt();
        let g_mean = gr.iter().fold(T::zero(), |a, &v| a + v) / n;
        let gy_mean = gr.iter().zip(yr).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv) / n;
        for c in 0..x.cols {
            out.data[r * x.cols + c] = s * (gr[c] - g_mean - yr[c] * gy_mean);
        }
    }
    out
}

fn softmax_rows_values<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = &x.data[r * x.cols..(r + 1) * x.cols];
        let max = row.iter().fold(T::neg_infinity(), |a, &v| if v > a { v } else { a });
        let mut total = T::zero();
        for c in 0..x.cols {
            let e = (row[c] - max).exp();
            out.data[r * x.cols + c] = e;
            total = total + e;
        }
        for c in 0..x.cols {
            out.data[r * x.cols + c] = out.data[r * x.cols + c] / total;
        }
    }
    out
}

/// Adam hyperparameters. Defaults: lr 2e-4, betas (0.9, 0.999), eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            lr: T::from_f64(2e-4),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Bias-corrected Adam: p -= lr * m_hat / (sqrt(v_hat) + eps). Moment
/// buffers are allocated on the first step and pinned to those shapes.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig<T>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig<T>) -> Self {
        Self { config, m: Vec::new(), v: Vec::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn adam_step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<(), AutodiffError> {
        if params.len() != grads.len() {
            return Err(AutodiffError::CountMismatch { params: params.len(), grads: grads.len() });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        } else if self.m.len() != params.len() {
            return Err(AutodiffError::CountMismatch { params: params.len(), grads: self.m.len() });
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = T::one() - c.beta1.powi(t);
        let bc2 = T::one() - c.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            if p.shape() != m.shape() {
                return Err(AutodiffError::ShapeMismatch { op: "adam_step", lhs: p.shape(), rhs: m.shape() });
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (T::one() - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (T::one() - c.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] = p.data[i] - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
