//! Vector polynomial Lyapunov candidates and their stability certificates.
//!
//! Each LPF row is `v_i(z) = b_β(z)ᵀ Q_i b_β(z)` over the reduced basis (no
//! constant entry), so `v_i(0) = 0` holds structurally. A certificate is a set
//! of derivative Gram blocks `G_i` over the reduced degree-`α+β` basis with
//!
//! ```text
//! v̇_i(z) + ε_decrease·‖z‖² = b_{α+β}(z)ᵀ G_i b_{α+β}(z),   G_i ⪯ 0,   Q_i ⪰ ε_pd·I.
//! ```
//!
//! All points passed to this module are in the model frame of the policy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::PolicyModel;
use crate::poly::{basis_vector, expand_gram, gram_support, BasisMode, BasisSpec, GramPolynomial, Monomial, MonomialPoly};
use crate::sym::{multiplicity, packed_len, packed_pairs, SymMatrix};

/// Largest coefficient mismatch accepted by [`check_certificate`].
pub const MATCHING_TOLERANCE: f64 = 1e-8;

/// Slack added to the decrease audit bound.
pub const AUDIT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LpfMode {
    /// One LPF per state dimension.
    #[default]
    Vector,
    /// A single LPF shared by all rows.
    Scalar,
}

impl std::str::FromStr for LpfMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(LpfMode::Vector),
            "scalar" => Ok(LpfMode::Scalar),
            other => Err(Error::Input(format!("unknown lpf mode '{other}'"))),
        }
    }
}

impl fmt::Display for LpfMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LpfMode::Vector => "vector",
            LpfMode::Scalar => "scalar",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovModel {
    pub n: usize,
    pub beta: usize,
    pub basis_mode: BasisMode,
    pub mode: LpfMode,
    pub blocks: Vec<SymMatrix>,
}

impl LyapunovModel {
    pub fn new(n: usize, beta: usize, basis_mode: BasisMode, mode: LpfMode, blocks: Vec<SymMatrix>) -> Result<Self> {
        let l = Self { n, beta, basis_mode, mode, blocks };
        l.validate()?;
        Ok(l)
    }

    /// `Q_i = I` for every block: the quadratic distance candidate when `β = 1`.
    pub fn identity(n: usize, beta: usize, basis_mode: BasisMode, mode: LpfMode) -> Self {
        let len = lpf_spec(n, beta, basis_mode).len();
        let count = block_count(n, mode);
        Self { n, beta, basis_mode, mode, blocks: vec![SymMatrix::identity(len); count] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta == 0 {
            return Err(Error::Input("LPF degree must be at least 1".into()));
        }
        check_dim(block_count(self.n, self.mode), self.blocks.len())?;
        let len = self.spec().len();
        for q in &self.blocks {
            check_dim(len, q.dim())?;
        }
        Ok(())
    }

    pub fn spec(&self) -> BasisSpec {
        lpf_spec(self.n, self.beta, self.basis_mode)
    }

    pub fn block_polys(&self) -> Vec<MonomialPoly> {
        let spec = self.spec();
        self.blocks
            .iter()
            .map(|q| expand_gram(&GramPolynomial { spec, matrix: q.clone() }))
            .collect()
    }

    /// `v̇_i = Σ_j ∂v_i/∂z_j · f_j` in monomial form, one per block.
    pub fn derivative_polys(&self, policy: &PolicyModel) -> Result<Vec<MonomialPoly>> {
        check_consistent(policy, self)?;
        let rows = policy.expanded_rows();
        self.block_polys()
            .iter()
            .map(|v| {
                let mut acc = MonomialPoly::zero(self.n);
                for (j, fj) in rows.iter().enumerate() {
                    acc = acc.add(&v.differentiate(j)?.multiply(fj)?)?;
                }
                Ok(acc)
            })
            .collect()
    }
}

pub fn block_count(n: usize, mode: LpfMode) -> usize {
    match mode {
        LpfMode::Vector => n,
        LpfMode::Scalar => 1,
    }
}

pub fn lpf_spec(n: usize, beta: usize, mode: BasisMode) -> BasisSpec {
    BasisSpec::new(n, beta, false).with_mode(mode)
}

pub fn derivative_spec(n: usize, alpha: usize, beta: usize, mode: BasisMode) -> BasisSpec {
    BasisSpec::new(n, alpha + beta, false).with_mode(mode)
}

fn check_consistent(policy: &PolicyModel, lpf: &LyapunovModel) -> Result<()> {
    policy.validate()?;
    lpf.validate()?;
    if policy.n != lpf.n {
        return Err(Error::Input(format!("policy has n = {} but LPF has n = {}", policy.n, lpf.n)));
    }
    if policy.basis_mode != lpf.basis_mode {
        return Err(Error::Input("policy and LPF use different basis modes".into()));
    }
    Ok(())
}

/// `v(z)`, one entry per block.
pub fn lpf_value(lpf: &LyapunovModel, z: &[f64]) -> Result<Vec<f64>> {
    lpf.validate()?;
    let b = basis_vector(z, &lpf.spec())?;
    Ok(lpf.blocks.iter().map(|q| q.quad_form(&b)).collect())
}

/// `dv/dt` along the policy at `z`, computed symbolically then evaluated.
pub fn lpf_time_derivative(lpf: &LyapunovModel, policy: &PolicyModel, z: &[f64]) -> Result<Vec<f64>> {
    check_dim(lpf.n, z.len())?;
    lpf.derivative_polys(policy)?.iter().map(|p| p.evaluate(z)).collect()
}

/// Sum of the vector LPF rows as a single scalar LPF.
pub fn aggregate_lpf(lpf: &LyapunovModel) -> Result<LyapunovModel> {
    lpf.validate()?;
    if lpf.mode == LpfMode::Scalar {
        return Err(Error::Input("LPF is already in scalar mode".into()));
    }
    let sum = lpf.blocks.iter().skip(1).fold(lpf.blocks[0].clone(), |acc, q| acc.add(q));
    LyapunovModel::new(lpf.n, lpf.beta, lpf.basis_mode, LpfMode::Scalar, vec![sum])
}

/// Coefficient of `Q[q] · P_block[p]` in one monomial of `v̇`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilinearTerm {
    pub q: usize,
    pub block: usize,
    pub p: usize,
    pub coef: f64,
}

/// One coefficient-matching equation:
/// `Σ coef·Q[q]·P_block[p] + shift = Σ_{(k,l) ∈ pairs} mult(k,l)·G[k,l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub monomial: Monomial,
    pub terms: Vec<BilinearTerm>,
    pub shift: f64,
    pub pairs: Vec<(usize, usize)>,
}

impl MatchRow {
    /// Left-hand side for fixed `P` and `Q`.
    pub fn target(&self, q: &SymMatrix, p: &[SymMatrix]) -> f64 {
        self.shift
            + self
                .terms
                .iter()
                .map(|t| t.coef * q.packed()[t.q] * p[t.block].packed()[t.p])
                .sum::<f64>()
    }

    pub fn gram_value(&self, g: &SymMatrix) -> f64 {
        self.pairs.iter().map(|&(k, l)| multiplicity(k, l) * g.get(k, l)).sum()
    }

    /// True when no choice of `P`, `Q` makes the left-hand side nonzero.
    pub fn structurally_zero(&self) -> bool {
        self.terms.is_empty() && self.shift == 0.0
    }
}

/// The coefficient-matching map between `(P, Q)` and the derivative Gram
/// blocks, as an equation system shared by every LPF block.
///
/// The bilinear terms assume `P_i[0,0] = 0` (the equilibrium constraint);
/// certificates are nevertheless checked against the full symbolic expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingSystem {
    pub n: usize,
    pub alpha: usize,
    pub beta: usize,
    pub basis_mode: BasisMode,
    pub eps_decrease: f64,
    pub ds_spec: BasisSpec,
    pub lpf_spec: BasisSpec,
    pub derivative_spec: BasisSpec,
    /// Monomials covered by the derivative basis.
    pub rows: Vec<MatchRow>,
    /// Monomials of `v̇` outside the derivative basis span; their coefficient must vanish.
    pub residuals: Vec<MatchRow>,
    /// Derivative basis indices whose Gram rows and columns are forced to zero
    /// by `G ⪯ 0` (zero diagonal with structurally zero target).
    pub fixed_zero: Vec<usize>,
}

pub fn build_matching_system(
    alpha: usize,
    beta: usize,
    n: usize,
    basis_mode: BasisMode,
    eps_decrease: f64,
) -> Result<MatchingSystem> {
    if alpha == 0 || beta == 0 {
        return Err(Error::Input("degrees must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::Input("state dimension must be at least 1".into()));
    }
    let ds_spec = BasisSpec::new(n, alpha, true).with_mode(basis_mode);
    let lpf = lpf_spec(n, beta, basis_mode);
    let der = derivative_spec(n, alpha, beta, basis_mode);

    let ds_mons = ds_spec.monomials();
    let lpf_mons = lpf.monomials();

    // monomial -> (q, block, p) -> coefficient
    let mut table: BTreeMap<Monomial, BTreeMap<(usize, usize, usize), f64>> = BTreeMap::new();
    for (qi, (a, b)) in packed_pairs(lpf_mons.len()).enumerate() {
        let vq = MonomialPoly::from_terms(n, [(lpf_mons[a].mul(&lpf_mons[b]), multiplicity(a, b))])?;
        for j in 0..n {
            let dv = vq.differentiate(j)?;
            for (pi, (c, d)) in packed_pairs(ds_mons.len()).enumerate() {
                if c == 0 && d == 0 {
                    continue;
                }
                let fp = MonomialPoly::from_terms(n, [(ds_mons[c].mul(&ds_mons[d]), multiplicity(c, d))])?;
                for (m, coef) in dv.multiply(&fp)?.terms() {
                    *table.entry(m.clone()).or_default().entry((qi, j, pi)).or_insert(0.0) += coef;
                }
            }
        }
    }

    let support = gram_support(&der);
    let mut rows = Vec::with_capacity(support.len());
    for (m, pairs) in &support {
        let shift = if is_square_of_coordinate(m) { eps_decrease } else { 0.0 };
        rows.push(MatchRow {
            monomial: m.clone(),
            terms: collect_terms(table.get(m)),
            shift,
            pairs: pairs.clone(),
        });
    }
    let residuals = table
        .iter()
        .filter(|(m, _)| !support.contains_key(*m))
        .map(|(m, t)| MatchRow { monomial: m.clone(), terms: collect_terms(Some(t)), shift: 0.0, pairs: Vec::new() })
        .filter(|r| !r.terms.is_empty())
        .collect();

    let fixed_zero = forced_zero_indices(&rows);
    Ok(MatchingSystem {
        n,
        alpha,
        beta,
        basis_mode,
        eps_decrease,
        ds_spec,
        lpf_spec: lpf,
        derivative_spec: der,
        rows,
        residuals,
        fixed_zero,
    })
}

fn is_square_of_coordinate(m: &Monomial) -> bool {
    m.degree() == 2 && m.0.contains(&2)
}

fn collect_terms(t: Option<&BTreeMap<(usize, usize, usize), f64>>) -> Vec<BilinearTerm> {
    t.map(|t| {
        t.iter()
            .filter(|(_, c)| **c != 0.0)
            .map(|(&(q, block, p), &coef)| BilinearTerm { q, block, p, coef })
            .collect()
    })
    .unwrap_or_default()
}

fn forced_zero_indices(rows: &[MatchRow]) -> Vec<usize> {
    let mut zero: BTreeSet<usize> = BTreeSet::new();
    loop {
        let mut changed = false;
        for r in rows.iter().filter(|r| r.structurally_zero()) {
            let live: Vec<(usize, usize)> =
                r.pairs.iter().copied().filter(|(k, l)| !zero.contains(k) && !zero.contains(l)).collect();
            if !live.is_empty() && live.iter().all(|(k, l)| k == l) {
                for (k, _) in live {
                    changed |= zero.insert(k);
                }
            }
        }
        if !changed {
            break;
        }
    }
    zero.into_iter().collect()
}

impl MatchingSystem {
    /// Derivative basis indices left after removing [`Self::fixed_zero`].
    pub fn face(&self) -> Vec<usize> {
        (0..self.derivative_spec.len()).filter(|k| !self.fixed_zero.contains(k)).collect()
    }

    pub fn is_on_face(&self, k: usize, l: usize) -> bool {
        !self.fixed_zero.contains(&k) && !self.fixed_zero.contains(&l)
    }

    pub fn lpf_packed_len(&self) -> usize {
        packed_len(self.lpf_spec.len())
    }

    pub fn ds_packed_len(&self) -> usize {
        packed_len(self.ds_spec.len())
    }

    /// Largest absolute violation over every row and residual for one block.
    pub fn max_violation(&self, q: &SymMatrix, p: &[SymMatrix], g: &SymMatrix) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.target(q, p) - r.gram_value(g)).abs())
            .chain(self.residuals.iter().map(|r| r.target(q, p).abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Matching,
    LpfNotPositive,
    DerivativeNotNegative,
    Audit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status")]
pub enum Verdict {
    Certified,
    Failed { reason: FailureReason, detail: String },
}

impl Verdict {
    pub fn is_certified(&self) -> bool {
        matches!(self, Verdict::Certified)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Certified => f.write_str("certified"),
            Verdict::Failed { reason, detail } => write!(f, "failed({reason:?}: {detail})"),
        }
    }
}

/// Random audit points in a box of the model frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: usize,
    pub seed: u64,
}

impl AuditConfig {
    pub fn symmetric(n: usize, half_width: f64) -> Self {
        Self { lo: vec![-half_width; n], hi: vec![half_width; n], points: 1000, seed: 0 }
    }

    /// Deterministic nonzero sample points.
    pub fn sample_points(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.points);
        while out.len() < self.points {
            let z: Vec<f64> = self.lo.iter().zip(&self.hi).map(|(&a, &b)| rng.gen_range(a..=b)).collect();
            if z.iter().any(|&v| v != 0.0) {
                out.push(z);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub points: usize,
    /// Points with `v_i > 0` for every block.
    pub positive_pass: usize,
    /// Points with `v̇_i < 0` for every block.
    pub decrease_pass: usize,
    /// Points with `v̇_i ≤ -ε_decrease·‖z‖² + slack` for every block.
    pub margin_pass: usize,
}

impl AuditSummary {
    pub fn all_pass(&self) -> bool {
        self.positive_pass == self.points && self.decrease_pass == self.points && self.margin_pass == self.points
    }
}

/// Positivity and decrease audit of an LPF along a policy, without a Gram certificate.
pub fn audit_lpf(
    lpf: &LyapunovModel,
    policy: &PolicyModel,
    eps_decrease: f64,
    audit: &AuditConfig,
) -> Result<AuditSummary> {
    check_consistent(policy, lpf)?;
    check_dim(lpf.n, audit.lo.len())?;
    check_dim(lpf.n, audit.hi.len())?;
    let vpolys = lpf.block_polys();
    let dpolys = lpf.derivative_polys(policy)?;
    let mut s = AuditSummary { points: audit.points, ..Default::default() };
    for z in audit.sample_points() {
        let norm_sq: f64 = z.iter().map(|v| v * v).sum();
        let mut pos = true;
        let mut dec = true;
        let mut margin = true;
        for (v, d) in vpolys.iter().zip(&dpolys) {
            let vz = v.evaluate(&z)?;
            let dz = d.evaluate(&z)?;
            pos &= vz > 0.0;
            dec &= dz < 0.0;
            margin &= dz <= -eps_decrease * norm_sq + AUDIT_SLACK;
        }
        s.positive_pass += pos as usize;
        s.decrease_pass += dec as usize;
        s.margin_pass += margin as usize;
    }
    Ok(s)
}

/// Derivative Gram blocks with the margins they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub g_blocks: Vec<SymMatrix>,
    pub eps_decrease: f64,
    pub eps_pd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<CertificateReport>,
}

impl StabilityCertificate {
    pub fn new(g_blocks: Vec<SymMatrix>, eps_decrease: f64, eps_pd: f64) -> Self {
        Self { g_blocks, eps_decrease, eps_pd, report: None }
    }

    pub fn is_certified(&self) -> bool {
        self.report.as_ref().is_some_and(|r| r.verdict.is_certified())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub verdict: Verdict,
    pub q_min_eig: Vec<f64>,
    pub g_max_eig: Vec<f64>,
    pub matching_residual: f64,
    pub eps_decrease: f64,
    pub eps_pd: f64,
    pub audit: AuditSummary,
}

/// Independent re-verification of a certificate: symbolic matching residual,
/// eigenvalue extremes, and a pointwise audit.
pub fn check_certificate(
    policy: &PolicyModel,
    lpf: &LyapunovModel,
    cert: &StabilityCertificate,
    audit: &AuditConfig,
) -> Result<CertificateReport> {
    check_consistent(policy, lpf)?;
    let der = derivative_spec(lpf.n, policy.alpha, lpf.beta, lpf.basis_mode);
    if cert.g_blocks.len() != lpf.blocks.len() {
        return Err(Error::Input(format!(
            "certificate has {} derivative blocks, LPF has {}",
            cert.g_blocks.len(),
            lpf.blocks.len()
        )));
    }
    for g in &cert.g_blocks {
        if g.dim() != der.len() {
            return Err(Error::Input(format!(
                "derivative block side {} does not match degree α+β = {} (expected {})",
                g.dim(),
                policy.alpha + lpf.beta,
                der.len()
            )));
        }
    }

    let mut shift = MonomialPoly::zero(lpf.n);
    for k in 0..lpf.n {
        shift.add_term(Monomial::var_pow(lpf.n, k, 2), cert.eps_decrease);
    }
    let mut residual: f64 = 0.0;
    for (vdot, g) in lpf.derivative_polys(policy)?.iter().zip(&cert.g_blocks) {
        let sos = expand_gram(&GramPolynomial { spec: der, matrix: g.clone() });
        let diff = vdot.add(&shift)?.add(&sos.scale(-1.0))?;
        residual = diff.terms().values().fold(residual, |acc, c| acc.max(c.abs()));
    }

    let q_min_eig: Vec<f64> = lpf.blocks.iter().map(|q| q.eigen_extremes().0).collect();
    let g_max_eig: Vec<f64> = cert.g_blocks.iter().map(|g| g.eigen_extremes().1).collect();
    let audit_summary = audit_lpf(lpf, policy, cert.eps_decrease, audit)?;

    let verdict = if !(residual <= MATCHING_TOLERANCE) {
        Verdict::Failed { reason: FailureReason::Matching, detail: format!("residual {residual:e}") }
    } else if let Some(v) = q_min_eig.iter().find(|&&v| !(v >= cert.eps_pd)) {
        Verdict::Failed { reason: FailureReason::LpfNotPositive, detail: format!("λ_min(Q) = {v:e}") }
    } else if let Some(v) = g_max_eig.iter().find(|&&v| !(v <= 0.0)) {
        Verdict::Failed { reason: FailureReason::DerivativeNotNegative, detail: format!("λ_max(G) = {v:e}") }
    } else if !audit_summary.all_pass() {
        Verdict::Failed {
            reason: FailureReason::Audit,
            detail: format!(
                "positive {}/{}, decrease {}/{}, margin {}/{}",
                audit_summary.positive_pass,
                audit_summary.points,
                audit_summary.decrease_pass,
                audit_summary.points,
                audit_summary.margin_pass,
                audit_summary.points
            ),
        }
    } else {
        Verdict::Certified
    };

    Ok(CertificateReport {
        verdict,
        q_min_eig,
        g_max_eig,
        matching_residual: residual,
        eps_decrease: cert.eps_decrease,
        eps_pd: cert.eps_pd,
        audit: audit_summary,
    })
}

/// Derivative Gram blocks obtained by distributing each row's target evenly
/// over its pairs. Exact for systems where every row has a single pair.
pub fn naive_gram_blocks(sys: &MatchingSystem, policy: &PolicyModel, lpf: &LyapunovModel) -> Vec<SymMatrix> {
    lpf.blocks
        .iter()
        .map(|q| {
            let mut g = SymMatrix::zeros(sys.derivative_spec.len());
            for r in &sys.rows {
                let t = r.target(q, &policy.blocks);
                let w: f64 = r.pairs.iter().map(|&(k, l)| multiplicity(k, l)).sum();
                for &(k, l) in &r.pairs {
                    g.set(k, l, t / w);
                }
            }
            g
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PolicyModel;

    fn linear_1d(rate: f64) -> PolicyModel {
        // f = rate · x over [1, x]
        PolicyModel::unit_frame(1, 1, vec![SymMatrix::from_rows(&[vec![0.0, rate / 2.0], vec![rate / 2.0, 0.0]])])
            .unwrap()
    }

    fn square_lpf() -> LyapunovModel {
        LyapunovModel::new(1, 1, BasisMode::Elementwise, LpfMode::Vector, vec![SymMatrix::identity(1)]).unwrap()
    }

    #[test]
    fn lpf_value_examples() {
        assert_eq!(lpf_value(&square_lpf(), &[2.0]).unwrap(), vec![4.0]);
        let l = LyapunovModel::identity(2, 1, BasisMode::Elementwise, LpfMode::Vector);
        assert_eq!(lpf_value(&l, &[1.0, 2.0]).unwrap(), vec![5.0, 5.0]);
        assert_eq!(lpf_value(&l, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(lpf_value(&l, &[1.0]).is_err());
    }

    #[test]
    fn time_derivative_examples() {
        let l = square_lpf();
        assert_eq!(lpf_time_derivative(&l, &linear_1d(-1.0), &[2.0]).unwrap(), vec![-8.0]);
        assert_eq!(lpf_time_derivative(&l, &linear_1d(-1.0), &[0.0]).unwrap(), vec![0.0]);

        // f = -x - 0.1 x³ needs α = 2: basis [1, x, x²], x³ from the (x, x²) pair.
        let mut p = SymMatrix::zeros(3);
        p.set(0, 1, -0.5);
        p.set(1, 2, -0.05);
        let m = PolicyModel::unit_frame(1, 2, vec![p]).unwrap();
        let d = lpf_time_derivative(&l, &m, &[1.0]).unwrap();
        assert!((d[0] + 2.2).abs() < 1e-14);
    }

    #[test]
    fn matching_rows_for_one_dimensional_quadratic() {
        let sys = build_matching_system(1, 1, 1, BasisMode::Elementwise, 0.0).unwrap();
        assert_eq!(sys.derivative_spec.len(), 2);
        let (q, p01, p11) = (1.7, -0.3, 0.9);
        let qm = SymMatrix::from_rows(&[vec![q]]);
        let pm = vec![SymMatrix::from_rows(&[vec![0.0, p01], vec![p01, p11]])];
        let row = |e: u16| sys.rows.iter().find(|r| r.monomial == Monomial(vec![e])).unwrap();
        // G00 = 4 q p01, 2 G01 = 2 q p11, G11 = 0
        assert!((row(2).target(&qm, &pm) - 4.0 * q * p01).abs() < 1e-14);
        assert_eq!(row(2).pairs, vec![(0, 0)]);
        assert!((row(3).target(&qm, &pm) - 2.0 * q * p11).abs() < 1e-14);
        assert_eq!(row(3).pairs, vec![(0, 1)]);
        assert_eq!(row(4).target(&qm, &pm), 0.0);
        assert!(row(4).structurally_zero());
        assert_eq!(sys.fixed_zero, vec![1]);
        assert!(sys.residuals.is_empty());
    }

    #[test]
    fn top_diagonal_is_forced_to_zero_in_one_dimension() {
        for alpha in 1..4 {
            for beta in 1..3 {
                let sys = build_matching_system(alpha, beta, 1, BasisMode::Elementwise, 0.0).unwrap();
                let last = sys.derivative_spec.len() - 1;
                let top = sys.rows.iter().find(|r| r.monomial.degree() as usize == 2 * (alpha + beta)).unwrap();
                assert_eq!(top.pairs, vec![(last, last)]);
                assert!(top.structurally_zero());
                assert!(sys.fixed_zero.contains(&last));
            }
        }
    }

    #[test]
    fn three_variable_product_is_residual() {
        let sys = build_matching_system(1, 1, 3, BasisMode::Elementwise, 0.0).unwrap();
        let m = Monomial(vec![1, 1, 1]);
        assert!(sys.residuals.iter().any(|r| r.monomial == m));
        assert!(sys.rows.iter().all(|r| r.monomial != m));
        // the full monomial basis covers it
        let full = build_matching_system(1, 1, 3, BasisMode::Full, 0.0).unwrap();
        assert!(full.rows.iter().any(|r| r.monomial == m));
    }

    #[test]
    fn stable_linear_case_certifies() {
        let m = linear_1d(-1.0);
        let l = square_lpf();
        let g = SymMatrix::from_rows(&[vec![-2.0, 0.0], vec![0.0, 0.0]]);
        let cert = StabilityCertificate::new(vec![g], 0.0, 1e-8);
        let r = check_certificate(&m, &l, &cert, &AuditConfig::symmetric(1, 2.0)).unwrap();
        assert_eq!(r.verdict, Verdict::Certified, "{r:?}");
        assert_eq!(r.g_max_eig, vec![0.0]);
        assert_eq!(r.matching_residual, 0.0);
    }

    #[test]
    fn unstable_linear_case_fails() {
        let m = linear_1d(1.0);
        let l = square_lpf();
        let sys = build_matching_system(1, 1, 1, BasisMode::Elementwise, 0.0).unwrap();
        let g = naive_gram_blocks(&sys, &m, &l);
        assert_eq!(g[0].get(0, 0), 2.0);
        let cert = StabilityCertificate::new(g, 0.0, 1e-8);
        let r = check_certificate(&m, &l, &cert, &AuditConfig::symmetric(1, 2.0)).unwrap();
        assert!(matches!(r.verdict, Verdict::Failed { reason: FailureReason::DerivativeNotNegative, .. }));
        assert!(r.g_max_eig[0] > 0.0);
    }

    #[test]
    fn corrupted_gram_fails_matching() {
        let m = linear_1d(-1.0);
        let l = square_lpf();
        let g = SymMatrix::from_rows(&[vec![-2.0, 1e-6], vec![1e-6, 0.0]]);
        let cert = StabilityCertificate::new(vec![g], 0.0, 1e-8);
        let r = check_certificate(&m, &l, &cert, &AuditConfig::symmetric(1, 2.0)).unwrap();
        assert!(matches!(r.verdict, Verdict::Failed { reason: FailureReason::Matching, .. }));
    }

    #[test]
    fn inconsistent_degrees_are_input_errors() {
        let m = linear_1d(-1.0);
        let l = square_lpf();
        let cert = StabilityCertificate::new(vec![SymMatrix::zeros(3)], 0.0, 1e-8);
        assert!(matches!(
            check_certificate(&m, &l, &cert, &AuditConfig::symmetric(1, 1.0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn aggregate_examples() {
        let l = LyapunovModel::identity(2, 1, BasisMode::Elementwise, LpfMode::Vector);
        let a = aggregate_lpf(&l).unwrap();
        assert_eq!(a.mode, LpfMode::Scalar);
        assert_eq!(a.blocks, vec![SymMatrix::identity(2).scale(2.0)]);
        assert!(matches!(aggregate_lpf(&a), Err(Error::Input(_))));
    }

    #[test]
    fn matching_system_is_deterministic() {
        let a = build_matching_system(3, 1, 2, BasisMode::Elementwise, 1e-6).unwrap();
        let b = build_matching_system(3, 1, 2, BasisMode::Elementwise, 1e-6).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
