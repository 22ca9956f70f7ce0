//! Dense factorizations not covered reliably by nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Full singular value decomposition `A = U Σ Vᵀ` with `U` (m×m) and `V` (n×n).
pub(crate) struct FullSvd {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub(crate) fn svd_full(a: &DMatrix<f64>) -> Result<FullSvd> {
    let (m, n) = a.shape();
    let fa = faer::Mat::from_fn(m, n, |i, j| a[(i, j)]);
    let svd = fa.svd().map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let (u, v, s) = (svd.U(), svd.V(), svd.S().column_vector());
    Ok(FullSvd {
        u: DMatrix::from_fn(m, m, |i, j| u[(i, j)]),
        sigma: (0..m.min(n)).map(|k| s[k]).collect(),
        v: DMatrix::from_fn(n, n, |i, j| v[(i, j)]),
    })
}

impl FullSvd {
    /// Number of singular values above `rel_tol · σ_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let smax = self.sigma.iter().copied().fold(0.0, f64::max);
        self.sigma.iter().filter(|&&s| s > rel_tol * smax && s > 0.0).count()
    }

    /// `A⁺ b` restricted to the leading `rank` singular triplets.
    pub fn solve(&self, b: &DVector<f64>, rank: usize) -> DVector<f64> {
        let mut x = DVector::zeros(self.v.nrows());
        for k in 0..rank {
            x.axpy(self.u.column(k).dot(b) / self.sigma[k], &self.v.column(k), 1.0);
        }
        x
    }

    /// Orthonormal basis of the null space beyond `rank`.
    pub fn null_space(&self, rank: usize) -> DMatrix<f64> {
        self.v.columns(rank, self.v.ncols() - rank).into_owned()
    }
}
