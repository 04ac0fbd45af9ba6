//! Dense row-major `f64` tensors with a reverse-mode tape.
//!
//! [`Tensor`] is an immutable value type. Differentiable computations are
//! recorded on a [`Graph`]; [`Graph::backward`] walks the tape in reverse and
//! returns [`Gradients`] for every leaf. [`finite_diff_check`] is the
//! independent central-difference oracle used to validate every backward rule.

mod gradcheck;
mod graph;
pub mod homt;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_many, finite_diff_check_with_fault, GradCheckReport,
};
pub use graph::{Gradients, Graph, Primitive, Var, VN_DEGENERATE_NORM};
pub use homt::Archive;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero dimensions, length mismatches and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::BadConfig(format!(
                "tensor dimensions must be positive: {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor"));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; len])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[cols], &[bad.len()]));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul_elem", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Adds a `[1, c]` row to every row of an `[r, c]` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.require_matrix("add_row")?;
        if row.shape != [1, c] {
            return Err(Error::shape("add_row", &self.shape, &row.shape));
        }
        let mut data = self.data.clone();
        for i in 0..r {
            for (d, &b) in data[i * c..(i + 1) * c].iter_mut().zip(&row.data) {
                *d += b;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn row_softmax(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("row_softmax")?;
        let mut data = self.data.clone();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::BadConfig("concat_cols of zero tensors".into()))?;
        let (rows, _) = first.require_matrix("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.require_matrix("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", &first.shape, &p.shape));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                let c = p.cols();
                data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        Ok(Tensor::from_parts(vec![rows, total], data))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
