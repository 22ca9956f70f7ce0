//! Polynomial vector-field policies.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::poly::{basis_vector, expand_gram, BasisMode, BasisSpec, GramPolynomial, MonomialPoly};
use crate::sym::SymMatrix;

/// Affine map between world coordinates and the model frame:
/// `z = (x - target) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub target: Vec<f64>,
    pub scale: f64,
}

impl Frame {
    pub fn identity(n: usize) -> Self {
        Self { target: vec![0.0; n], scale: 1.0 }
    }

    pub fn to_model(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.target).map(|(xi, ti)| (xi - ti) / self.scale).collect()
    }

    pub fn to_world(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.target).map(|(zi, ti)| zi * self.scale + ti).collect()
    }
}

/// `ẋ = f(x)` with row `i` equal to `b_α(z)ᵀ P_i b_α(z)` in the model frame.
///
/// World velocities are `scale · g(z)`, so the dynamics in `z` and in `x`
/// share time units and stability properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub n: usize,
    pub alpha: usize,
    pub basis_mode: BasisMode,
    pub frame: Frame,
    pub blocks: Vec<SymMatrix>,
}

impl PolicyModel {
    pub fn new(n: usize, alpha: usize, basis_mode: BasisMode, frame: Frame, blocks: Vec<SymMatrix>) -> Result<Self> {
        let m = Self { n, alpha, basis_mode, frame, blocks };
        m.validate()?;
        Ok(m)
    }

    /// Model in the identity frame.
    pub fn unit_frame(n: usize, alpha: usize, blocks: Vec<SymMatrix>) -> Result<Self> {
        Self::new(n, alpha, BasisMode::Elementwise, Frame::identity(n), blocks)
    }

    pub fn zeros(n: usize, alpha: usize, basis_mode: BasisMode, frame: Frame) -> Self {
        let len = BasisSpec::new(n, alpha, true).with_mode(basis_mode).len();
        Self { n, alpha, basis_mode, frame, blocks: vec![SymMatrix::zeros(len); n] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 {
            return Err(Error::Input("policy degree must be at least 1".into()));
        }
        check_dim(self.n, self.blocks.len())?;
        check_dim(self.n, self.frame.target.len())?;
        if !(self.frame.scale.is_finite() && self.frame.scale > 0.0) {
            return Err(Error::Input("frame scale must be positive".into()));
        }
        let len = self.spec().len();
        for b in &self.blocks {
            check_dim(len, b.dim())?;
        }
        Ok(())
    }

    pub fn spec(&self) -> BasisSpec {
        BasisSpec::new(self.n, self.alpha, true).with_mode(self.basis_mode)
    }

    /// Field in model coordinates.
    pub fn field_model(&self, z: &[f64]) -> Result<Vec<f64>> {
        let b = basis_vector(z, &self.spec())?;
        Ok(self.blocks.iter().map(|p| p.quad_form(&b)).collect())
    }

    /// Field in world coordinates.
    pub fn field(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n, x.len())?;
        let z = self.frame.to_model(x);
        let g = self.field_model(&z)?;
        Ok(g.into_iter().map(|v| v * self.frame.scale).collect())
    }

    pub fn row(&self, i: usize) -> GramPolynomial {
        GramPolynomial { spec: self.spec(), matrix: self.blocks[i].clone() }
    }

    /// Rows of the field in model coordinates, in monomial form.
    pub fn expanded_rows(&self) -> Vec<MonomialPoly> {
        (0..self.n).map(|i| expand_gram(&self.row(i))).collect()
    }

    /// `‖P‖_1` summed over all blocks.
    pub fn l1_norm(&self) -> f64 {
        self.blocks.iter().map(SymMatrix::l1_norm).sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.blocks.iter().map(SymMatrix::frobenius_sq).sum()
    }
}
