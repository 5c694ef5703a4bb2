//! Dense row-major `f64` tensors and the row gather/scatter primitives the
//! stochastic-backprop operators are built from.
//!
//! Everything channel-wise treats a tensor as a matrix: the last dimension is
//! the column count and all leading dimensions are flattened into rows, so a
//! `(B, T, H, W, C)` activation is a `(B·T·H·W) × C` matrix.
//!
//! Reductions always run left to right over the contracted index. Nothing is
//! reassociated, so results are bit-reproducible across runs and thread counts.

use crate::error::{dim_err, Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Ordered grid dimensions (tokens, spatial positions). Every dim is at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(dim_err!("shape must have at least one dimension"));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(dim_err!("shape {dims:?} has a zero-sized dimension at axis {pos}"));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    /// Row-major multi-index of a flat position.
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut coords = vec![0; self.0.len()];
        for (axis, &d) in self.0.iter().enumerate().rev() {
            coords[axis] = flat % d;
            flat /= d;
        }
        coords
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("×"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `data.len()` matches the shape. Zero-sized
    /// leading dimensions are allowed so that empty row selections are
    /// representable.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() {
            return Err(dim_err!("tensor shape must be nonempty"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err!("shape {shape:?} needs {expected} elements, got {}", data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Convenience constructor for small matrices in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_err!("ragged rows"));
        }
        Tensor::new([r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Column count of the matrix view.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is nonempty")
    }

    /// Row count of the matrix view (product of all leading dims).
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols()).unwrap_or_else(|| self.shape[..self.shape.len() - 1].iter().product())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Same data viewed as a `rows × cols` matrix.
    pub fn as_matrix(&self) -> Tensor {
        Tensor { shape: vec![self.rows(), self.cols()], data: self.data.clone() }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, what: &str) -> Result<Tensor> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(format!("{what} produced NaN or infinity")))
        }
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!("{op}: shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Column sums of the matrix view, accumulated top to bottom.
    pub fn col_sum(&self) -> Tensor {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for i in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Tensor { shape: vec![c], data: out }
    }

    /// Adds `bias` (length = cols) to every row.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.numel() != self.cols() {
            return Err(dim_err!("bias length {} != cols {}", bias.numel(), self.cols()));
        }
        let mut out = self.clone();
        let c = self.cols();
        for row in out.data.chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Copy of `self` with the listed rows set to zero.
    pub fn zero_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let n = self.rows();
        let mut out = self.clone();
        for &i in idx {
            if i >= n {
                return Err(Error::Index(format!("row {i} out of range for {n} rows")));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(out)
    }

    /// Columns `start..start+len` of the matrix view.
    pub fn col_block(&self, start: usize, len: usize) -> Tensor {
        let r = self.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Tensor { shape: vec![r, len], data }
    }

    /// Writes `block` into columns `start..start+block.cols()`.
    pub fn set_col_block(&mut self, start: usize, block: &Tensor) {
        let len = block.cols();
        for i in 0..self.rows() {
            self.row_mut(i)[start..start + len].copy_from_slice(block.row(i));
        }
    }

    /// Rows `start..start+len` of the matrix view.
    pub fn row_block(&self, start: usize, len: usize) -> Tensor {
        let c = self.cols();
        Tensor { shape: vec![len, c], data: self.data[start * c..(start + len) * c].to_vec() }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Tensor]) -> Result<Tensor> {
        let c = parts.first().map_or(0, Tensor::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(dim_err!("vstack: column counts {} and {} differ", c, p.cols()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: vec![rows, c], data })
    }
}

fn check_inner(a: &Tensor, b: &Tensor, ak: usize, bk: usize, op: &str) -> Result<()> {
    if ak != bk {
        return Err(dim_err!("{op}: inner dimensions differ ({:?} vs {:?})", a.shape(), b.shape()));
    }
    Ok(())
}

/// `a · b` for an `m×k` and a `k×n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (bk, n) = (b.rows(), b.cols());
    check_inner(a, b, k, bk, "matmul")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }.ensure_finite("matmul")
}

/// `aᵀ · b` for a `k×m` and a `k×n` matrix, without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = (a.rows(), a.cols());
    let (bk, n) = (b.rows(), b.cols());
    check_inner(a, b, k, bk, "matmul_tn")?;
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }.ensure_finite("matmul_tn")
}

/// `a · bᵀ` for an `m×k` and an `n×k` matrix.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, bk) = (b.rows(), b.cols());
    check_inner(a, b, k, bk, "matmul_nt")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor { shape: vec![m, n], data: out }.ensure_finite("matmul_nt")
}

/// Rows `idx` of `x`, in the order given. Reads no other row.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let n = x.rows();
    let c = x.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        if i >= n {
            return Err(Error::Index(format!("gather index {i} out of range for {n} rows")));
        }
        data.extend_from_slice(x.row(i));
    }
    Ok(Tensor { shape: vec![idx.len(), c], data })
}

/// Returns `dst` with row `idx[j]` incremented by row `j` of `src`.
pub fn scatter_rows_add(dst: &Tensor, idx: &[usize], src: &Tensor) -> Result<Tensor> {
    let n = dst.rows();
    let c = dst.cols();
    if src.rows() != idx.len() || src.cols() != c {
        return Err(dim_err!("scatter: src is {}×{}, expected {}×{c}", src.rows(), src.cols(), idx.len()));
    }
    let mut seen = vec![false; n];
    let mut out = dst.clone();
    for (j, &i) in idx.iter().enumerate() {
        if i >= n {
            return Err(Error::Index(format!("scatter index {i} out of range for {n} rows")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Contract(format!("scatter index {i} appears more than once")));
        }
        for (o, v) in out.row_mut(i).iter_mut().zip(src.row(j)) {
            *o += v;
        }
    }
    out.ensure_finite("scatter_rows_add")
}
