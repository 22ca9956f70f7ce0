//! Dense symmetric matrices stored as a row-major upper triangle.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    upper: Vec<f64>,
}

/// Number of stored entries for a side length.
pub fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Position of entry `(k, l)` in the packed upper triangle (order-insensitive).
#[inline]
pub fn packed_index(dim: usize, k: usize, l: usize) -> usize {
    let (k, l) = if k <= l { (k, l) } else { (l, k) };
    k * dim - k * (k.max(1) - 1) / 2 + (l - k)
}

/// Iterates `(k, l)` with `k <= l` in packed order.
pub fn packed_pairs(dim: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..dim).flat_map(move |k| (k..dim).map(move |l| (k, l)))
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, upper: vec![0.0; packed_len(dim)] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for k in 0..dim {
            m.set(k, k, 1.0);
        }
        m
    }

    pub fn from_packed(dim: usize, upper: Vec<f64>) -> Option<Self> {
        (upper.len() == packed_len(dim)).then_some(Self { dim, upper })
    }

    /// Builds from a full square matrix, symmetrizing as `(B + Bᵀ)/2`.
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "square matrix required");
        let dim = m.nrows();
        let mut out = Self::zeros(dim);
        for (k, l) in packed_pairs(dim) {
            out.set(k, l, 0.5 * (m[(k, l)] + m[(l, k)]));
        }
        out
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.len();
        let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
        Self::from_dmatrix(&m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[f64] {
        &self.upper
    }

    pub fn packed_mut(&mut self) -> &mut [f64] {
        &mut self.upper
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.upper[packed_index(self.dim, k, l)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, l: usize, value: f64) {
        let idx = packed_index(self.dim, k, l);
        self.upper[idx] = value;
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    /// `vᵀ B v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.dim);
        let mut acc = 0.0;
        for (k, l) in packed_pairs(self.dim) {
            let b = self.get(k, l);
            if k == l {
                acc += b * v[k] * v[k];
            } else {
                acc += 2.0 * b * v[k] * v[l];
            }
        }
        acc
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.dim, other.dim);
        SymMatrix {
            dim: self.dim,
            upper: self.upper.iter().zip(&other.upper).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix { dim: self.dim, upper: self.upper.iter().map(|v| v * s).collect() }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|k| self.get(k, k)).sum()
    }

    /// Entry-wise sum of absolute values over the full matrix.
    pub fn l1_norm(&self) -> f64 {
        packed_pairs(self.dim)
            .map(|(k, l)| multiplicity(k, l) * self.get(k, l).abs())
            .sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        packed_pairs(self.dim)
            .map(|(k, l)| multiplicity(k, l) * self.get(k, l).powi(2))
            .sum()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.dim == 0 {
            return Vec::new();
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(self.to_dmatrix()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Smallest and largest eigenvalue. Rows and columns that are exactly zero
    /// contribute an exact zero eigenvalue and are excluded from the numeric
    /// eigensolve.
    pub fn eigen_extremes(&self) -> (f64, f64) {
        let active: Vec<usize> = (0..self.dim)
            .filter(|&k| (0..self.dim).any(|l| self.get(k, l) != 0.0))
            .collect();
        let has_zero = active.len() < self.dim;
        let sub = DMatrix::from_fn(active.len(), active.len(), |i, j| self.get(active[i], active[j]));
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        if !active.is_empty() {
            for &v in SymmetricEigen::new(sub).eigenvalues.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if has_zero {
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        (lo, hi)
    }
}

/// Weight of a packed entry in a quadratic form: 1 on the diagonal, 2 off it.
#[inline]
pub fn multiplicity(k: usize, l: usize) -> f64 {
    if k == l {
        1.0
    } else {
        2.0
    }
}
