//! Dense row-major matrices, vectors and elementwise activation kernels.
//!
//! Everything is `f64`. Operations allocate fresh outputs and never mutate
//! their inputs, so values can be shared freely between threads.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{EbmError, Result};

/// A dense vector of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    /// Unit basis vector `e_i`.
    pub fn basis(len: usize, i: usize) -> Self {
        let mut v = Self::zeros(len);
        v.0[i] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_len("dot", self.len(), other.len())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Vector {
        self.map(|a| a * factor)
    }

    /// `self + factor * other`
    pub fn axpy(&self, factor: f64, other: &Vector) -> Result<Vector> {
        self.zip_with(other, "axpy", |a, b| a + factor * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.0.iter().map(|&a| f(a)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|a| a.is_finite())
    }

    /// Index of the largest entry (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &a) in self.0.iter().enumerate() {
            if a > self.0[best] {
                best = i;
            }
        }
        best
    }

    fn zip_with(&self, other: &Vector, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vector> {
        check_len(op, self.len(), other.len())?;
        Ok(Vector(
            self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self(data)
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

fn check_len(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(EbmError::Shape(format!(
            "{op}: vector lengths {a} and {b} differ"
        )));
    }
    Ok(())
}

/// A dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EbmError::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(EbmError::Shape("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        Vector((0..self.rows).map(|r| self.get(r, c)).collect())
    }

    /// `self · v`
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(EbmError::Shape(format!(
                "matvec: matrix {}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let x = v.as_slice();
        Ok(Vector(
            self.data
                .chunks_exact(self.cols)
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        ))
    }

    /// `selfᵀ · v`
    pub fn matvec_transposed(&self, v: &Vector) -> Result<Vector> {
        if self.rows != v.len() {
            return Err(EbmError::Shape(format!(
                "matvec_transposed: matrix {}x{} (transposed) times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (row, &a) in self.data.chunks_exact(self.cols).zip(v.as_slice()) {
            if a == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
        Ok(Vector(out))
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: &Vector, b: &Vector) -> Matrix {
        let mut data = Vec::with_capacity(a.len() * b.len());
        for &x in a.iter() {
            data.extend(b.iter().map(|&y| x * y));
        }
        Matrix {
            rows: a.len(),
            cols: b.len(),
            data,
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `self + factor * other`
    pub fn axpy(&self, factor: f64, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "axpy", |a, b| a + factor * b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * factor).collect(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(EbmError::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Free-function form of [`Matrix::matvec`].
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    m.matvec(v)
}

/// Elementwise nonlinearities. Softmax is only valid as an output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Linear,
    Softmax,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Linear => "linear",
            ActivationKind::Softmax => "softmax",
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = EbmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "linear" => Ok(Self::Linear),
            "softmax" => Ok(Self::Softmax),
            other => Err(EbmError::InvalidConfig(format!(
                "unknown activation '{other}'"
            ))),
        }
    }
}

pub fn apply_activation(kind: ActivationKind, v: &Vector) -> Vector {
    match kind {
        ActivationKind::Relu => v.map(|a| a.max(0.0)),
        ActivationKind::Tanh => v.map(f64::tanh),
        ActivationKind::Linear => v.clone(),
        ActivationKind::Softmax => softmax(v),
    }
}

/// Elementwise derivative at pre-activation `v`. The relu derivative at
/// exactly zero is 0.
pub fn activation_derivative(kind: ActivationKind, v: &Vector) -> Result<Vector> {
    match kind {
        ActivationKind::Relu => Ok(v.map(|a| if a > 0.0 { 1.0 } else { 0.0 })),
        ActivationKind::Tanh => Ok(v.map(|a| {
            let t = a.tanh();
            1.0 - t * t
        })),
        ActivationKind::Linear => Ok(Vector::filled(v.len(), 1.0)),
        ActivationKind::Softmax => Err(EbmError::Domain(
            "softmax has no elementwise derivative; it is fused with cross-entropy".into(),
        )),
    }
}

fn softmax(v: &Vector) -> Vector {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a));
    let exps: Vec<f64> = v.iter().map(|&a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Vector(exps.into_iter().map(|e| e / total).collect())
}
