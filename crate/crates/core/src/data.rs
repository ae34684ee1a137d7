//! Row-major feature matrices and weighted training sets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.cols) {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: bad + 1,
            });
        }
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend(cols.iter().map(|&c| r[c]));
        }
        Ok(Self {
            rows: self.rows,
            cols: cols.len(),
            data,
        })
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: other.cols,
            });
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }
}

/// Features with soft or hard targets in `[0, 1]` and per-example weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Vec<f64>) -> Result<Self> {
        let weights = vec![1.0; targets.len()];
        Self::with_weights(features, targets, weights)
    }

    pub fn with_weights(features: Matrix, targets: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if targets.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                got: targets.len(),
            });
        }
        if weights.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: targets.len(),
                got: weights.len(),
            });
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidSpec(format!("targets must lie in [0, 1], got {t}")));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidSpec(format!("weights must be finite and >= 0, got {w}")));
        }
        Ok(Self {
            features,
            targets,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    pub fn select_features(&self, cols: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_cols(cols)?,
            targets: self.targets.clone(),
            weights: self.weights.clone(),
        })
    }

    pub fn mean_target(&self) -> f64 {
        self.targets.iter().sum::<f64>() / self.len() as f64
    }
}

/// SHA-256 over the little-endian bytes of every value, in order.
pub fn content_hash<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        for v in part {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_and_row_selection() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.select_cols(&[2, 0]).unwrap().as_slice(), &[3.0, 1.0, 6.0, 4.0]);
        assert_eq!(m.select_rows(&[1]).as_slice(), &[4.0, 5.0, 6.0]);
        assert!(m.select_cols(&[3]).is_err());
    }

    #[test]
    fn dataset_validation() {
        let m = Matrix::zeros(2, 1);
        assert!(Dataset::new(m.clone(), vec![0.0]).is_err());
        assert!(Dataset::new(m.clone(), vec![0.0, 1.5]).is_err());
        assert!(Dataset::with_weights(m.clone(), vec![0.0, 1.0], vec![1.0, -1.0]).is_err());
        assert!(Dataset::new(m, vec![0.3, 1.0]).is_ok());
    }

    #[test]
    fn hash_depends_on_values_and_boundaries() {
        let a = content_hash([&[1.0, 2.0][..], &[3.0][..]]);
        let b = content_hash([&[1.0][..], &[2.0, 3.0][..]]);
        let c = content_hash([&[1.0, 2.0][..], &[3.0][..]]);
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
