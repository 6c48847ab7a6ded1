//! Dense parameter vectors.
//!
//! All reductions accumulate sequentially from index 0 upward so that a
//! trajectory replayed with the same seed is reproduced bit for bit.

use std::ops::{Deref, Index, IndexMut};

use crate::error::{Error, Result};

/// A flat real parameter vector (student iterate, teacher, or minimizer).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    /// Builds a vector and rejects NaN or infinite entries.
    pub fn try_finite(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite entry at index {i}")));
        }
        Ok(ParamVector(values))
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

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_len(self.len(), other.len())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `alpha * self + other`.
    pub fn axpy(&self, alpha: f64, other: &ParamVector) -> Result<ParamVector> {
        check_len(self.len(), other.len())?;
        Ok(ParamVector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| alpha * a + b)
                .collect(),
        ))
    }

    /// In-place `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        check_len(self.len(), other.len())?;
        axpy_in_place(alpha, &other.0, &mut self.0);
        Ok(())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_len(self.len(), other.len())?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| alpha * v).collect())
    }

    pub fn dist_sq(&self, other: &ParamVector) -> Result<f64> {
        check_len(self.len(), other.len())?;
        let mut acc = 0.0;
        for (a, b) in self.0.iter().zip(&other.0) {
            let d = a - b;
            acc += d * d;
        }
        Ok(acc)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Cosine similarity; `None` when either vector is zero.
    pub fn cosine(&self, other: &ParamVector) -> Result<Option<f64>> {
        let d = self.dot(other)?;
        let denom = (self.norm_sq() * other.norm_sq()).sqrt();
        if denom == 0.0 {
            return Ok(None);
        }
        Ok(Some((d / denom).clamp(-1.0, 1.0)))
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Dot product over equal-length slices with four fixed accumulation lanes,
/// so the summation order (and the result) is independent of the platform.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (x, y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`.
#[inline]
pub fn axpy_in_place(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Free-function forms with length checking, mirroring the method API.
pub fn try_dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.dot(b)
}

pub fn try_axpy(alpha: f64, a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    a.axpy(alpha, b)
}

pub fn norm_sq(a: &ParamVector) -> f64 {
    a.norm_sq()
}
