//! Learning globally stable polynomial dynamical-system policies from
//! demonstrations, with sum-of-squares Lyapunov certificates.

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod learn;
mod linalg;
pub mod lyapunov;
pub mod model;
pub mod poly;
pub mod rollout;
pub mod solver;
pub mod sym;

pub use error::{Error, Result};
pub use lyapunov::{
    aggregate_lpf, build_matching_system, check_certificate, lpf_time_derivative, lpf_value, AuditConfig,
    CertificateReport, LpfMode, LyapunovModel, MatchingSystem, StabilityCertificate, Verdict,
};
pub use model::{Frame, PolicyModel};
pub use poly::{basis_vector, eval_gram, expand_gram, gram_support, BasisMode, BasisSpec, GramPolynomial, Monomial, MonomialPoly};
pub use sym::SymMatrix;

/// Crate version recorded in exported artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
