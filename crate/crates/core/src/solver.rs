//! Small dense conic solver: convex quadratic plus weighted ℓ1 objective over
//! affine sections of products of (shifted) semidefinite cones and boxes.
//!
//! ```text
//! minimize    ½ xᵀHx + cᵀx + Σ w_k |x_k|
//! subject to  A x = b
//!             lo_k ≤ x_k ≤ hi_k               (scalar variables)
//!             X_j ⪰ lo_j·I  or  X_j ⪯ hi_j·I   (matrix variables, packed upper triangle)
//! ```
//!
//! The method is ADMM on the splitting `x = z`: the `x`-update is an
//! equality-constrained quadratic solved exactly in the null space of `A`,
//! and the `z`-update is the proximal map of the ℓ1 term and the cones.
//! Matrix variables are handled in svec coordinates (off-diagonals scaled by
//! √2) so the projection is in the Frobenius metric.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::svd_full;
use crate::sym::{packed_len, packed_pairs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MatrixCone {
    /// `X ⪰ min_eig·I`
    Psd { min_eig: f64 },
    /// `X ⪯ max_eig·I`
    Nsd { max_eig: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixVar {
    pub offset: usize,
    pub dim: usize,
    pub cone: MatrixCone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
    pub label: String,
}

impl LinearRow {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum()
    }
}

/// Solver-facing normal form.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProblem {
    num_vars: usize,
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
    pub l1: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    pub equalities: Vec<LinearRow>,
    matrix_vars: Vec<MatrixVar>,
    in_matrix: Vec<bool>,
}

impl ConicProblem {
    pub fn new() -> Self {
        Self {
            num_vars: 0,
            quad: DMatrix::zeros(0, 0),
            lin: DVector::zeros(0),
            constant: 0.0,
            l1: Vec::new(),
            bounds: Vec::new(),
            equalities: Vec::new(),
            matrix_vars: Vec::new(),
            in_matrix: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn matrix_vars(&self) -> &[MatrixVar] {
        &self.matrix_vars
    }

    fn grow(&mut self, count: usize, in_matrix: bool) -> usize {
        let offset = self.num_vars;
        let n = offset + count;
        self.quad = self.quad.clone().resize(n, n, 0.0);
        self.lin = self.lin.clone().resize_vertically(n, 0.0);
        self.l1.resize(n, 0.0);
        self.bounds.resize(n, (f64::NEG_INFINITY, f64::INFINITY));
        self.in_matrix.resize(n, in_matrix);
        self.num_vars = n;
        offset
    }

    /// Adds `count` free scalar variables; returns the first index.
    pub fn add_scalars(&mut self, count: usize) -> usize {
        self.grow(count, false)
    }

    /// Adds a symmetric matrix variable stored as a packed upper triangle;
    /// returns its offset.
    pub fn add_matrix(&mut self, dim: usize, cone: MatrixCone) -> usize {
        let offset = self.grow(packed_len(dim), true);
        self.matrix_vars.push(MatrixVar { offset, dim, cone });
        offset
    }

    pub fn add_equality(&mut self, terms: Vec<(usize, f64)>, rhs: f64, label: impl Into<String>) {
        self.equalities.push(LinearRow { terms, rhs, label: label.into() });
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * xv.dot(&(&self.quad * &xv))
            + self.lin.dot(&xv)
            + self.constant
            + x.iter().zip(&self.l1).map(|(v, w)| w * v.abs()).sum::<f64>()
    }

    fn validate(&self) -> Result<()> {
        for (i, &m) in self.in_matrix.iter().enumerate() {
            if m && (self.l1[i] != 0.0 || self.bounds[i] != (f64::NEG_INFINITY, f64::INFINITY)) {
                return Err(Error::Input(format!("variable {i} belongs to a matrix and cannot carry ℓ1 or bounds")));
            }
            if self.l1[i] < 0.0 || self.bounds[i].0 > self.bounds[i].1 {
                return Err(Error::Input(format!("variable {i} has an invalid ℓ1 weight or bound")));
            }
        }
        for row in &self.equalities {
            if row.terms.iter().any(|&(i, _)| i >= self.num_vars) {
                return Err(Error::Input(format!("row '{}' references an undeclared variable", row.label)));
            }
        }
        Ok(())
    }
}

impl Default for ConicProblem {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmSettings {
    pub max_iters: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub rho: f64,
    pub relaxation: f64,
    pub check_every: usize,
    pub adapt_every: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            eps_abs: 1e-10,
            eps_rel: 1e-10,
            rho: 1.0,
            relaxation: 1.6,
            check_every: 10,
            adapt_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Solved,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    /// Iterate satisfying the equalities to rounding error.
    pub x: Vec<f64>,
    /// Iterate lying exactly in the cones and boxes.
    pub z: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub status: SolveStatus,
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Relative singular value below which an equality direction is dependent.
const RANK_TOLERANCE: f64 = 1e-9;

/// Relative row norm below which an equality is considered empty.
const NEGLIGIBLE_ROW: f64 = 1e-12;

struct Prepared {
    /// x = scale ⊙ x̃
    scale: Vec<f64>,
    /// particular solution of the equalities (scaled space)
    xp: DVector<f64>,
    /// null-space basis rotated onto the reduced Hessian eigenbasis
    w: DMatrix<f64>,
    lambda: DVector<f64>,
    h0: DVector<f64>,
}

fn prepare(p: &ConicProblem) -> Result<Prepared> {
    let n = p.num_vars;
    let mut scale = vec![1.0; n];
    for mv in &p.matrix_vars {
        for (idx, (k, l)) in packed_pairs(mv.dim).enumerate() {
            if k != l {
                scale[mv.offset + idx] = 1.0 / SQRT2;
            }
        }
    }

    let m = p.equalities.len();
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    for (r, row) in p.equalities.iter().enumerate() {
        for &(i, c) in &row.terms {
            a[(r, i)] += c * scale[i];
        }
        b[r] = row.rhs;
    }
    // Rows many orders of magnitude below the largest are treated as zero
    // rows; normalizing them would turn rounding noise into constraints.
    let norms: Vec<f64> = (0..m).map(|r| a.row(r).norm()).collect();
    let floor = NEGLIGIBLE_ROW * norms.iter().copied().fold(0.0, f64::max);
    for r in 0..m {
        if norms[r] > floor {
            a.row_mut(r).scale_mut(1.0 / norms[r]);
            b[r] /= norms[r];
        } else if b[r].abs() > floor {
            return Err(Error::Infeasible { rows: vec![p.equalities[r].label.clone()] });
        } else {
            a.row_mut(r).fill(0.0);
            b[r] = 0.0;
        }
    }

    let (xp, null) = if m == 0 {
        (DVector::zeros(n), DMatrix::identity(n, n))
    } else {
        let svd = svd_full(&a)?;
        let rank = svd.rank(RANK_TOLERANCE);
        let xp = svd.solve(&b, rank);
        let resid = &a * &xp - &b;
        let bad: Vec<String> = (0..m)
            .filter(|&r| resid[r].abs() > 1e-8 * (1.0 + b[r].abs()))
            .map(|r| p.equalities[r].label.clone())
            .collect();
        if !bad.is_empty() {
            return Err(Error::Infeasible { rows: bad });
        }
        (xp, svd.null_space(rank))
    };

    let hs = DMatrix::from_fn(n, n, |i, j| p.quad[(i, j)] * scale[i] * scale[j]);
    let cs = DVector::from_fn(n, |i, _| p.lin[i] * scale[i]);
    let k = null.transpose() * &hs * &null;
    let k = (&k + k.transpose()) * 0.5;
    let (lambda, w) = if null.ncols() == 0 {
        (DVector::zeros(0), DMatrix::zeros(n, 0))
    } else {
        let eig = SymmetricEigen::new(k);
        let lambda = eig.eigenvalues.map(|v| v.max(0.0));
        (lambda, &null * eig.eigenvectors)
    };
    let h0 = w.transpose() * (-(&cs) - &hs * &xp);
    Ok(Prepared { scale, xp, w, lambda, h0 })
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn project_matrix(v: &mut [f64], dim: usize, cone: MatrixCone) {
    let mut m = DMatrix::zeros(dim, dim);
    for (idx, (k, l)) in packed_pairs(dim).enumerate() {
        let val = if k == l { v[idx] } else { v[idx] / SQRT2 };
        m[(k, l)] = val;
        m[(l, k)] = val;
    }
    let eig = SymmetricEigen::new(m);
    let clipped = eig.eigenvalues.map(|e| match cone {
        MatrixCone::Psd { min_eig } => e.max(min_eig),
        MatrixCone::Nsd { max_eig } => e.min(max_eig),
    });
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    for (idx, (k, l)) in packed_pairs(dim).enumerate() {
        let val = 0.5 * (r[(k, l)] + r[(l, k)]);
        v[idx] = if k == l { val } else { val * SQRT2 };
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, &b| a.max(b.abs()))
}

/// Solves the problem with ADMM. A run that exhausts `max_iters` is returned
/// with [`SolveStatus::MaxIterations`]; callers decide whether the iterate is usable.
pub fn solve(p: &ConicProblem, settings: &AdmmSettings) -> Result<ConicSolution> {
    p.validate()?;
    let n = p.num_vars;
    let prep = prepare(p)?;
    let scale = &prep.scale;
    let l1: Vec<f64> = (0..n).map(|i| p.l1[i] * scale[i]).collect();
    let bounds: Vec<(f64, f64)> = (0..n).map(|i| (p.bounds[i].0 / scale[i], p.bounds[i].1 / scale[i])).collect();
    let scalars: Vec<usize> = (0..n).filter(|&i| !p.in_matrix[i]).collect();

    let mut rho = settings.rho;
    let relax = settings.relaxation;
    let mut x = prep.xp.clone();
    let mut z = x.clone();
    let mut u = DVector::zeros(n);
    let mut z_prev;
    let mut status = SolveStatus::MaxIterations;
    let (mut r_p, mut r_d) = (f64::INFINITY, f64::INFINITY);
    let mut iterations = 0;

    let prox = |w: &mut DVector<f64>, rho: f64| {
        for &i in &scalars {
            let v = soft_threshold(w[i], l1[i] / rho);
            w[i] = v.clamp(bounds[i].0, bounds[i].1);
        }
        for mv in &p.matrix_vars {
            let len = packed_len(mv.dim);
            project_matrix(&mut w.as_mut_slice()[mv.offset..mv.offset + len], mv.dim, mv.cone);
        }
    };

    for it in 1..=settings.max_iters {
        iterations = it;
        // x-update
        let v = &z - &u;
        if prep.w.ncols() > 0 {
            let mut coef = prep.w.transpose() * &v * rho + &prep.h0;
            for (c, l) in coef.iter_mut().zip(prep.lambda.iter()) {
                *c /= l + rho;
            }
            x = &prep.xp + &prep.w * coef;
        } else {
            x.copy_from(&prep.xp);
        }
        let xr = &x * relax + &z * (1.0 - relax);
        z_prev = z.clone();
        z = &xr + &u;
        prox(&mut z, rho);
        u += &xr - &z;

        if it % settings.check_every == 0 || it == settings.max_iters {
            r_p = inf_norm(&(&x - &z));
            r_d = rho * inf_norm(&(&z - &z_prev));
            let eps_p = settings.eps_abs + settings.eps_rel * inf_norm(&x).max(inf_norm(&z));
            let eps_d = settings.eps_abs + settings.eps_rel * rho * inf_norm(&u);
            if r_p <= eps_p && r_d <= eps_d {
                status = SolveStatus::Solved;
                break;
            }
            if settings.adapt_every > 0 && it % settings.adapt_every == 0 {
                let pn = r_p / inf_norm(&x).max(inf_norm(&z)).max(1e-12);
                let dn = r_d / (rho * inf_norm(&u)).max(1e-12);
                let ratio = (pn / dn.max(1e-300)).sqrt();
                if !(0.2..=5.0).contains(&ratio) && ratio.is_finite() {
                    let new_rho = (rho * ratio).clamp(1e-6, 1e6);
                    u *= rho / new_rho;
                    rho = new_rho;
                }
            }
        }
    }

    let xo: Vec<f64> = x.iter().zip(scale).map(|(v, s)| v * s).collect();
    let zo: Vec<f64> = z.iter().zip(scale).map(|(v, s)| v * s).collect();
    Ok(ConicSolution {
        objective: p.objective(&zo),
        x: xo,
        z: zo,
        iterations,
        primal_residual: r_p,
        dual_residual: r_d,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equality_constrained_least_squares() {
        // min ½(x0-1)² + ½(x1-2)²  s.t. x0 + x1 = 1  ->  x = (0, 1)
        let mut p = ConicProblem::new();
        let o = p.add_scalars(2);
        p.quad[(o, o)] = 1.0;
        p.quad[(o + 1, o + 1)] = 1.0;
        p.lin[o] = -1.0;
        p.lin[o + 1] = -2.0;
        p.add_equality(vec![(o, 1.0), (o + 1, 1.0)], 1.0, "sum");
        let s = solve(&p, &AdmmSettings::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Solved);
        assert!((s.x[0] - 0.0).abs() < 1e-8 && (s.x[1] - 1.0).abs() < 1e-8, "{:?}", s.x);
    }

    #[test]
    fn lasso_soft_threshold() {
        // min ½(x-3)² + 2|x|  ->  x = 1
        let mut p = ConicProblem::new();
        let o = p.add_scalars(1);
        p.quad[(o, o)] = 1.0;
        p.lin[o] = -3.0;
        p.l1[o] = 2.0;
        let s = solve(&p, &AdmmSettings::default()).unwrap();
        assert!((s.z[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn nearest_psd_matrix() {
        // min ½‖X - C‖_F² with X ⪰ 0, C = diag(1, -1)  ->  X = diag(1, 0)
        let mut p = ConicProblem::new();
        let o = p.add_matrix(2, MatrixCone::Psd { min_eig: 0.0 });
        // packed entries: (0,0), (0,1), (1,1); Frobenius weights 1, 2, 1
        p.quad[(o, o)] = 1.0;
        p.quad[(o + 1, o + 1)] = 2.0;
        p.quad[(o + 2, o + 2)] = 1.0;
        p.lin[o] = -1.0;
        p.lin[o + 2] = 1.0;
        let s = solve(&p, &AdmmSettings::default()).unwrap();
        assert!((s.z[0] - 1.0).abs() < 1e-7 && s.z[1].abs() < 1e-7 && s.z[2].abs() < 1e-7, "{:?}", s.z);
    }

    #[test]
    fn maximize_smallest_eigenvalue_with_fixed_trace() {
        // max t  s.t. X - tI ⪰ 0 , tr X = 2, X01 = 0.5  ->  t = 0.5
        let mut p = ConicProblem::new();
        let x = p.add_matrix(2, MatrixCone::Psd { min_eig: f64::NEG_INFINITY });
        let w = p.add_matrix(2, MatrixCone::Psd { min_eig: 0.0 });
        let t = p.add_scalars(1);
        p.bounds[t] = (f64::NEG_INFINITY, 10.0);
        p.lin[t] = -1.0;
        p.add_equality(vec![(x, 1.0), (x + 2, 1.0)], 2.0, "trace");
        p.add_equality(vec![(x + 1, 1.0)], 0.5, "offdiag");
        for (i, diag) in [(0, true), (1, false), (2, true)] {
            let mut terms = vec![(w + i, 1.0), (x + i, -1.0)];
            if diag {
                terms.push((t, 1.0));
            }
            p.add_equality(terms, 0.0, format!("link{i}"));
        }
        let s = solve(&p, &AdmmSettings::default()).unwrap();
        assert!((s.z[t] - 0.5).abs() < 1e-6, "t = {}", s.z[t]);
    }

    #[test]
    fn inconsistent_equalities_are_reported() {
        let mut p = ConicProblem::new();
        let o = p.add_scalars(1);
        p.add_equality(vec![(o, 1.0)], 1.0, "a");
        p.add_equality(vec![(o, 1.0)], 2.0, "b");
        match solve(&p, &AdmmSettings::default()) {
            Err(Error::Infeasible { rows }) => assert!(!rows.is_empty()),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn redundant_equalities_are_tolerated() {
        let mut p = ConicProblem::new();
        let o = p.add_scalars(2);
        p.quad[(o, o)] = 1.0;
        p.quad[(o + 1, o + 1)] = 1.0;
        p.add_equality(vec![(o, 1.0), (o + 1, 1.0)], 2.0, "a");
        p.add_equality(vec![(o, 2.0), (o + 1, 2.0)], 4.0, "b");
        let s = solve(&p, &AdmmSettings::default()).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-8 && (s.x[1] - 1.0).abs() < 1e-8);
    }
}
