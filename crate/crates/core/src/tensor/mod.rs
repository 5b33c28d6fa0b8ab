//! Dense row-major tensors.
//!
//! Storage is always `f64`; the [`Precision`] tag decides the logical element
//! width. An `F32` tensor rounds every produced element through `f32`, so its
//! values are exactly what a single-precision kernel would hold, and its byte
//! accounting uses four bytes per element.
//!
//! Reductions sum sequentially from the first element to the last. Results are
//! therefore bitwise reproducible for a given input.

mod io;

use std::fmt;

use thiserror::Error;

pub use io::{read_tensor, write_tensor};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape {0:?}: dims must be non-empty and every dim >= 1")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects a rank-{expected} tensor, got rank {actual}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("division by zero in {op} at element {index}")]
    DivisionByZero { op: &'static str, index: usize },
    #[error("precision mismatch in {op}: {left} vs {right}")]
    PrecisionMismatch {
        op: &'static str,
        left: Precision,
        right: Precision,
    },
    #[error("{op} produced a non-finite value at element {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("malformed tensor record: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Logical scalar precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::F32),
            1 => Some(Precision::F64),
            _ => None,
        }
    }

    #[inline]
    fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => f.write_str("fp32"),
            Precision::F64 => f.write_str("fp64"),
        }
    }
}

/// Ordered list of positive dimension sizes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorError::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

/// Elementwise binary operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Max => "max",
        }
    }
}

/// Elementwise unary maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryMap {
    Square,
    Sqrt,
    Exp,
    Scale(f64),
    AddScalar(f64),
}

impl UnaryMap {
    fn name(self) -> &'static str {
        match self {
            UnaryMap::Square => "square",
            UnaryMap::Sqrt => "sqrt",
            UnaryMap::Exp => "exp",
            UnaryMap::Scale(_) => "scale",
            UnaryMap::AddScalar(_) => "add_scalar",
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryMap::Square => x * x,
            UnaryMap::Sqrt => x.sqrt(),
            UnaryMap::Exp => x.exp(),
            UnaryMap::Scale(k) => k * x,
            UnaryMap::AddScalar(k) => x + k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.0,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            precision: Precision::F64,
        })
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(TensorError::DimensionMismatch {
                op: "from_rows",
                left: vec![n],
                right: vec![bad.len()],
            });
        }
        Tensor::from_vec(vec![m, n], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::from_vec(vec![n], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![value],
            precision: Precision::F64,
        }
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![value; n],
            precision: Precision::F64,
        })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::full(dims, 0.0)
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::full(dims, 1.0)
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
            precision: self.precision,
        }
    }

    /// Retags the tensor, rounding every element when narrowing to `F32`.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self.round_in_place();
        self
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Logical size in bytes under the tensor's precision.
    pub fn byte_size(&self) -> usize {
        self.numel() * self.precision.byte_width()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep elements finite and
    /// must round to `f32` themselves when writing into an `F32` tensor.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor, or the first element otherwise.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Element `(i, j)` of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        let n = self.dims()[self.rank() - 1];
        self.data[i * n + j]
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(TensorError::DimensionMismatch {
                op: "reshape",
                left: self.dims().to_vec(),
                right: shape.0,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims() {
            [m, n] => Ok((*m, *n)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                actual: self.rank(),
            }),
        }
    }

    fn round_in_place(&mut self) {
        if self.precision == Precision::F32 {
            for x in &mut self.data {
                *x = Precision::F32.round(*x);
            }
        }
    }

    fn check_precision(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.precision != other.precision {
            return Err(TensorError::PrecisionMismatch {
                op,
                left: self.precision,
                right: other.precision,
            });
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::DimensionMismatch {
                op,
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        self.check_precision(other, op)
    }

    fn with_data(&self, dims: Vec<usize>, data: Vec<f64>) -> Tensor {
        let mut t = Tensor {
            shape: Shape(dims),
            data,
            precision: self.precision,
        };
        t.round_in_place();
        t
    }

    /// Matrix product of `[m x k]` and `[k x n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        self.check_precision(other, "matmul")?;
        let mut out = vec![0.0; m * n];
        matmul_kernel(&self.data, &other.data, &mut out, m, k, n);
        Ok(self.with_data(vec![m, n], out))
    }

    /// `selfᵀ · other` for `self: [k x m]`, `other: [k x n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.matrix_dims("matmul_tn")?;
        let (k2, n) = other.matrix_dims("matmul_tn")?;
        if k != k2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul_tn",
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        self.check_precision(other, "matmul_tn")?;
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(self.with_data(vec![m, n], out))
    }

    /// `self · otherᵀ` for `self: [m x k]`, `other: [n x k]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (_, k) = self.matrix_dims("matmul_nt")?;
        let (_, k2) = other.matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul_nt",
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        self.matmul(&other.transpose()?)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(self.with_data(vec![n, m], out))
    }

    /// Per-row sums of a 2-D tensor, shape `[m x 1]`.
    pub fn row_sums(&self) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("row_sums")?;
        let out = self
            .data
            .chunks_exact(n)
            .map(|row| row.iter().fold(0.0, |acc, &x| acc + x))
            .collect();
        Ok(self.with_data(vec![m, 1], out))
    }

    /// Per-column sums of a 2-D tensor, shape `[1 x n]`.
    pub fn col_sums(&self) -> Result<Tensor> {
        let (_, n) = self.matrix_dims("col_sums")?;
        let mut out = vec![0.0; n];
        for row in self.data.chunks_exact(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Ok(self.with_data(vec![1, n], out))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x * x)
    }

    pub fn norm_l2(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    /// Root mean square over all elements.
    pub fn rms(&self) -> f64 {
        (self.sum_sq() / self.numel() as f64).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, &x| acc.max(x.abs()))
    }

    pub fn elementwise(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        self.check_same_shape(other, op.name())?;
        let out: Vec<f64> = match op {
            BinaryOp::Add => zip_map(&self.data, &other.data, |a, b| a + b),
            BinaryOp::Sub => zip_map(&self.data, &other.data, |a, b| a - b),
            BinaryOp::Mul => zip_map(&self.data, &other.data, |a, b| a * b),
            BinaryOp::Max => zip_map(&self.data, &other.data, f64::max),
            BinaryOp::Div => {
                if let Some(index) = other.data.iter().position(|&b| b == 0.0) {
                    return Err(TensorError::DivisionByZero { op: "div", index });
                }
                zip_map(&self.data, &other.data, |a, b| a / b)
            }
        };
        Ok(self.with_data(self.dims().to_vec(), out))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Div)
    }

    pub fn map(&self, f: UnaryMap) -> Result<Tensor> {
        let out: Vec<f64> = self.data.iter().map(|&x| f.apply(x)).collect();
        if let Some(index) = out.iter().position(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite {
                op: f.name(),
                index,
            });
        }
        Ok(self.with_data(self.dims().to_vec(), out))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let out = self.data.iter().map(|&x| k * x).collect();
        self.with_data(self.dims().to_vec(), out)
    }

    /// Applies `f` to every element without finiteness checks.
    pub fn map_with(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let out = self.data.iter().map(|&x| f(x)).collect();
        self.with_data(self.dims().to_vec(), out)
    }

    /// `self += k * other`, in place.
    pub fn axpy_(&mut self, k: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        let p = self.precision;
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x = p.round(*x + k * y);
        }
        Ok(())
    }

    /// `self += other`, in place.
    pub fn add_(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add")?;
        let p = self.precision;
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x = p.round(*x + y);
        }
        Ok(())
    }

    pub fn scale_(&mut self, k: f64) {
        let p = self.precision;
        for x in &mut self.data {
            *x = p.round(k * *x);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `out[m x n] += a[m x k] · b[k x n]`, accumulating over `k` in ascending order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}
