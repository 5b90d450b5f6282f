//! Dense row-major tensors: `Tensor` for f32 activations and weights,
//! `QTensor` for signed 8-bit payloads with one per-tensor scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest magnitude representable by the symmetric int8 grid.
pub const QMAX: i32 = 127;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Builds a `rows x cols` tensor by evaluating `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimensions flattened into rows; the last dimension is columns.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Rows `[start, start + len)` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (rows, cols) = self.dims2("slice_rows")?;
        if start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of {rows}", start + len),
            ));
        }
        Ok(Self {
            shape: vec![len, cols],
            data: self.data[start * cols..(start + len) * cols].to_vec(),
        })
    }

    /// Columns `[start, start + len)` as a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (rows, cols) = self.dims2("slice_cols")?;
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} out of {cols}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + start + len]);
        }
        Ok(Self {
            shape: vec![rows, len],
            data,
        })
    }

    /// Writes `src` into columns starting at `start`.
    pub fn write_cols(&mut self, start: usize, src: &Tensor) -> Result<()> {
        let (rows, cols) = self.dims2("write_cols")?;
        let (srows, scols) = src.dims2("write_cols")?;
        if srows != rows || start + scols > cols {
            return Err(Error::shape(
                "write_cols",
                format!("cannot place {srows}x{scols} at column {start} of {rows}x{cols}"),
            ));
        }
        for r in 0..rows {
            self.data[r * cols + start..r * cols + start + scols].copy_from_slice(src.row(r));
        }
        Ok(())
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Tensor]) -> Result<Self> {
        let cols = match parts.first() {
            Some(t) => t.dims2("vstack")?.1,
            None => return Err(Error::shape("vstack", "no parts")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2("vstack")?;
            if c != cols {
                return Err(Error::shape("vstack", format!("column count {c} != {cols}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Appends the rows of `other` in place.
    pub fn append_rows(&mut self, other: &Tensor) -> Result<()> {
        let (_, cols) = self.dims2("append_rows")?;
        let (r, c) = other.dims2("append_rows")?;
        if c != cols {
            return Err(Error::shape("append_rows", format!("column count {c} != {cols}")));
        }
        self.data.extend_from_slice(&other.data);
        self.shape[0] += r;
        Ok(())
    }

    /// Drops every row from `rows` on.
    pub fn truncate_rows(&mut self, rows: usize) {
        let cols = self.cols();
        if rows < self.rows() {
            self.data.truncate(rows * cols);
            self.shape[0] = rows;
        }
    }

    /// Selects the listed rows, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (rows, cols) = self.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape("gather_rows", format!("row {i} out of {rows}")));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            shape: vec![idx.len(), cols],
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, k: f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }
}

/// Signed 8-bit payload on the symmetric grid `[-127, 127]` with a single scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    scale: f32,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, scale: f32) -> Result<Self> {
        check_scale(scale)?;
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::shape(
                "QTensor::new",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|&q| q == i8::MIN) {
            return Err(Error::Invariant("QTensor payload contains -128".into()));
        }
        Ok(Self { shape, data, scale })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> &[i8] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&q| f32::from(q) * self.scale).collect(),
        }
    }
}

pub(crate) fn check_scale(s: f32) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidScale(s))
    }
}
