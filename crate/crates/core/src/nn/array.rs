//! Minimal owned n-dimensional `f64` array.
//!
//! Just enough surface for the velocity networks: shape-checked
//! construction, 2-D matrix products in the layouts the backward passes
//! need, and elementwise combinators. Row-major throughout.

use thiserror::Error;

use crate::Real;

#[derive(Debug, Error)]
pub enum ArrayError {
    #[error("data length {got} does not match shape {shape:?}")]
    LengthMismatch { got: usize, shape: Vec<usize> },
    #[error("expected a 2-d array, got shape {shape:?}")]
    NotTwoDim { shape: Vec<usize> },
    #[error("inner dimensions do not match: {a:?} x {b:?}")]
    MatmulMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
}

/// Owned row-major array with a dynamic shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NumArray {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl NumArray {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Self, ArrayError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(ArrayError::LengthMismatch {
                got: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    /// `(rows, cols)` of a 2-d array.
    pub fn dims2(&self) -> Result<(usize, usize), ArrayError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(ArrayError::NotTwoDim {
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, r: usize) -> &[Real] {
        let (_, c) = self.dims2().expect("row() on 2-d arrays only");
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Real] {
        let (_, c) = self.dims2().expect("row_mut() on 2-d arrays only");
        &mut self.data[r * c..(r + 1) * c]
    }

    /// `self (m x k) . other (k x n)`.
    pub fn matmul(&self, other: &NumArray) -> Result<NumArray, ArrayError> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(ArrayError::MatmulMismatch {
                a: self.shape.clone(),
                b: other.shape.clone(),
            });
        }
        let mut out = NumArray::zeros(&[m, n]);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T (k x m)^T . other (k x n)`, i.e. contraction over rows.
    pub fn matmul_tn(&self, other: &NumArray) -> Result<NumArray, ArrayError> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(ArrayError::MatmulMismatch {
                a: self.shape.clone(),
                b: other.shape.clone(),
            });
        }
        let mut out = NumArray::zeros(&[m, n]);
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self (m x k) . other^T (n x k)^T`.
    pub fn matmul_nt(&self, other: &NumArray) -> Result<NumArray, ArrayError> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(ArrayError::MatmulMismatch {
                a: self.shape.clone(),
                b: other.shape.clone(),
            });
        }
        let mut out = NumArray::zeros(&[m, n]);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &other.data[j * k..(j + 1) * k];
                *o = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &NumArray) -> Result<(), ArrayError> {
        if self.shape != other.shape {
            return Err(ArrayError::ShapeMismatch {
                a: self.shape.clone(),
                b: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: Real) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
