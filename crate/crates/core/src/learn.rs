//! Alternating learning of a polynomial policy and its Lyapunov certificate.
//!
//! Every iterate is driven by two convex subproblems solved with the conic
//! solver: the policy step fits `P` for a fixed LPF, and the LPF step
//! maximizes the decrease slack for a fixed policy. A final sequential
//! convex phase moves `P` and `Q` jointly inside a trust region. Iterates are
//! only kept after [`check_certificate`] accepts them.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, DemonstrationSet};
use crate::error::{Error, Result};
use crate::linalg::svd_full;
use crate::lyapunov::{
    block_count, build_matching_system, check_certificate, AuditConfig, LpfMode, LyapunovModel, MatchRow,
    MatchingSystem, StabilityCertificate,
};
use crate::model::{Frame, PolicyModel};
use crate::poly::{basis_vector, BasisMode, BasisSpec};
use crate::solver::{solve, AdmmSettings, ConicProblem, MatrixCone, SolveStatus};
use crate::sym::{multiplicity, packed_index, packed_len, packed_pairs, SymMatrix};

pub const MODEL_SCHEMA: &str = "plyds-model/1";

/// Environment variable consulted for the default seed.
pub const SEED_ENV: &str = "PLYDS_SEED";

const POLICY_RETRIES: usize = 3;

/// Sparse constraint row: (variable, coefficient) terms and a right-hand side.
type SparseRow = (Vec<(usize, f64)>, f64);

/// Upper bound on the decrease slack in the LPF step.
const SLACK_CAP: f64 = 10.0;

pub fn default_seed() -> u64 {
    std::env::var(SEED_ENV).ok().and_then(|s| s.trim().parse().ok()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    /// Policy degree `α`.
    pub alpha: usize,
    /// LPF degree `β`.
    pub beta: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Decrease margin `ε_decrease` and stopping tolerance on the objective.
    pub tolerance: f64,
    pub max_alternations: usize,
    pub sqp_steps: usize,
    pub basis_mode: BasisMode,
    /// Retry with the full monomial basis when the element-wise basis leaves
    /// no certified policy (only matters for `n ≥ 3`).
    pub escalate_basis: bool,
    pub lpf_mode: LpfMode,
    pub seed: u64,
    /// `ε_pd`: required smallest eigenvalue of every `Q_i`.
    pub eps_pd: f64,
    /// Eigenvalue margin kept on the derivative Gram blocks inside the solver.
    pub gram_margin: f64,
    /// Eigenvalue margin kept on `Q_i` inside the solver.
    pub lpf_margin: f64,
    pub audit_points: usize,
    pub normalize_velocities: bool,
    pub admm: AdmmSettings,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            alpha: 3,
            beta: 1,
            lambda1: 1e-5,
            lambda2: 1e-5,
            tolerance: 1e-6,
            max_alternations: 10,
            sqp_steps: 4,
            basis_mode: BasisMode::Elementwise,
            escalate_basis: false,
            lpf_mode: LpfMode::Vector,
            seed: default_seed(),
            eps_pd: 1e-8,
            gram_margin: 1e-6,
            lpf_margin: 1e-6,
            audit_points: 1000,
            normalize_velocities: false,
            admm: AdmmSettings { max_iters: 20_000, eps_abs: 1e-9, eps_rel: 1e-9, ..AdmmSettings::default() },
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 {
            return Err(Error::Input("alpha must be at least 1".into()));
        }
        if self.beta == 0 {
            return Err(Error::Input("beta must be at least 1".into()));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Input(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(1e-9..=1e-4).contains(&self.tolerance) {
            return Err(Error::Input(format!("tolerance must lie in [1e-9, 1e-4], got {}", self.tolerance)));
        }
        if !(self.eps_pd > 0.0 && self.lpf_margin >= self.eps_pd && self.gram_margin >= 0.0) {
            return Err(Error::Input("eigenvalue margins must satisfy lpf_margin ≥ eps_pd > 0".into()));
        }
        if self.audit_points == 0 {
            return Err(Error::Input("audit needs at least one point".into()));
        }
        Ok(())
    }
}

/// Data fit `(1/2N_t) Σ ‖f̂(x) - ẋ‖²` plus elastic-net regularization, as a
/// quadratic form in the packed entries of each `P_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub n: usize,
    pub spec: BasisSpec,
    /// `ΦᵀΦ / N_t`, shared by every row of the field.
    pub hessian: DMatrix<f64>,
    /// `Φᵀ y_i / N_t` per output coordinate.
    pub cross: Vec<DVector<f64>>,
    /// `Σ ‖ẋ‖² / (2 N_t)`.
    pub energy: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub samples: usize,
}

pub fn assemble_objective(
    data: &DemonstrationSet,
    alpha: usize,
    basis_mode: BasisMode,
    lambda1: f64,
    lambda2: f64,
) -> Result<Objective> {
    if alpha == 0 {
        return Err(Error::Input("alpha must be at least 1".into()));
    }
    let nt = data.n_total();
    if nt == 0 {
        return Err(Error::Input("no samples to fit".into()));
    }
    let spec = BasisSpec::new(data.n, alpha, true).with_mode(basis_mode);
    let len = spec.len();
    let lp = packed_len(len);
    let mut hessian = DMatrix::zeros(lp, lp);
    let mut cross = vec![DVector::zeros(lp); data.n];
    let mut energy = 0.0;
    let mut phi = DVector::zeros(lp);
    for (x, v) in data.samples() {
        let b = basis_vector(x, &spec)?;
        for (idx, (k, l)) in packed_pairs(len).enumerate() {
            phi[idx] = multiplicity(k, l) * b[k] * b[l];
        }
        hessian.ger(1.0, &phi, &phi, 1.0);
        for (c, vi) in cross.iter_mut().zip(v) {
            c.axpy(*vi, &phi, 1.0);
        }
        energy += v.iter().map(|a| a * a).sum::<f64>();
    }
    let inv = 1.0 / nt as f64;
    hessian *= inv;
    for c in &mut cross {
        *c *= inv;
    }
    Ok(Objective { n: data.n, spec, hessian, cross, energy: 0.5 * energy * inv, lambda1, lambda2, samples: nt })
}

impl Objective {
    pub fn data_term(&self, blocks: &[SymMatrix]) -> f64 {
        let mut acc = self.energy;
        for (p, c) in blocks.iter().zip(&self.cross) {
            let pv = DVector::from_column_slice(p.packed());
            acc += 0.5 * pv.dot(&(&self.hessian * &pv)) - c.dot(&pv);
        }
        acc.max(0.0)
    }

    pub fn regularizer(&self, blocks: &[SymMatrix]) -> f64 {
        blocks.iter().map(|p| self.lambda1 * p.l1_norm() + self.lambda2 * p.frobenius_sq()).sum()
    }

    pub fn value(&self, blocks: &[SymMatrix]) -> f64 {
        self.data_term(blocks) + self.regularizer(blocks)
    }

    /// Writes the objective for `P` variables starting at `offset` into `prob`.
    fn install(&self, prob: &mut ConicProblem, offset: usize) {
        let lp = self.hessian.nrows();
        let len = self.spec.len();
        for (i, c) in self.cross.iter().enumerate() {
            let o = offset + i * lp;
            let mut view = prob.quad.view_mut((o, o), (lp, lp));
            view += &self.hessian;
            for (idx, (k, l)) in packed_pairs(len).enumerate() {
                let m = multiplicity(k, l);
                prob.quad[(o + idx, o + idx)] += 2.0 * self.lambda2 * m;
                prob.l1[o + idx] = self.lambda1 * m;
                prob.lin[o + idx] -= c[idx];
            }
        }
        prob.constant += self.energy;
    }
}

/// Indexing of the derivative Gram entries that survive facial reduction.
struct Face {
    dim: usize,
    pos: Vec<Option<usize>>,
}

impl Face {
    fn new(sys: &MatchingSystem) -> Self {
        let face = sys.face();
        let mut pos = vec![None; sys.derivative_spec.len()];
        for (i, &k) in face.iter().enumerate() {
            pos[k] = Some(i);
        }
        Self { dim: face.len(), pos }
    }

    fn packed(&self, k: usize, l: usize) -> Option<usize> {
        Some(packed_index(self.dim, self.pos[k]?, self.pos[l]?))
    }

    fn pairs<'a>(&'a self, row: &'a MatchRow) -> impl Iterator<Item = (usize, usize)> + 'a {
        row.pairs.iter().copied().filter(|&(k, l)| self.packed(k, l).is_some())
    }

    fn embed(&self, full: usize, g: &SymMatrix) -> SymMatrix {
        let mut out = SymMatrix::zeros(full);
        for k in 0..full {
            for l in k..full {
                if let Some(i) = self.packed(k, l) {
                    out.packed_mut()[packed_index(full, k, l)] = g.packed()[i];
                }
            }
        }
        out
    }

    fn restrict(&self, g: &SymMatrix) -> SymMatrix {
        let mut out = SymMatrix::zeros(self.dim);
        for (k, pk) in self.pos.iter().enumerate() {
            for (l, pl) in self.pos.iter().enumerate().skip(k) {
                if let (Some(a), Some(b)) = (pk, pl) {
                    out.set(*a, *b, g.get(k, l));
                }
            }
        }
        out
    }
}

fn packed_slice(x: &[f64], offset: usize, dim: usize) -> SymMatrix {
    SymMatrix::from_packed(dim, x[offset..offset + packed_len(dim)].to_vec()).expect("packed length")
}

/// Minimum-norm correction of `x` onto `{x : C x = d}`.
fn project_affine(x: &mut [f64], rows: &[(Vec<(usize, f64)>, f64)]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let mut c = DMatrix::<f64>::zeros(rows.len(), x.len());
    let mut resid = DVector::<f64>::zeros(rows.len());
    for (r, (terms, rhs)) in rows.iter().enumerate() {
        for &(i, v) in terms {
            c[(r, i)] += v;
        }
        resid[r] = terms.iter().map(|&(i, v)| v * x[i]).sum::<f64>() - rhs;
    }
    let svd = svd_full(&c)?;
    let dx = svd.solve(&resid, svd.rank(1e-12));
    for (xi, d) in x.iter_mut().zip(dx.iter()) {
        *xi -= d;
    }
    Ok(())
}

/// Distributes each row's mismatch over its on-face pairs so that every
/// matching equation holds exactly for the given `P`, `Q`.
fn polish_gram(sys: &MatchingSystem, face: &Face, q: &SymMatrix, p: &[SymMatrix], g_face: &SymMatrix) -> SymMatrix {
    let full = sys.derivative_spec.len();
    let mut g = face.embed(full, g_face);
    for r in &sys.rows {
        let pairs: Vec<(usize, usize)> = face.pairs(r).collect();
        if pairs.is_empty() {
            continue;
        }
        let mismatch = r.target(q, p) - r.gram_value(&g);
        let w: f64 = pairs.iter().map(|&(k, l)| multiplicity(k, l)).sum();
        for (k, l) in pairs {
            g.set(k, l, g.get(k, l) + mismatch / w);
        }
    }
    g
}

/// Largest eigenvalue of the on-face part of a derivative Gram block.
fn face_max_eig(face: &Face, g: &SymMatrix) -> f64 {
    if face.dim == 0 {
        return f64::NEG_INFINITY;
    }
    face.restrict(g).eigen_extremes().1
}

fn warn_unconverged(what: &str, status: SolveStatus, iterations: usize) {
    if status == SolveStatus::MaxIterations {
        log::debug!("{what}: solver stopped at the iteration limit ({iterations})");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub p_blocks: Vec<SymMatrix>,
    pub g_blocks: Vec<SymMatrix>,
    pub objective: f64,
    pub iterations: usize,
}

/// Fits `P` for a fixed LPF subject to the matching constraints and
/// `G_i ⪯ -gram_margin·I` on the reduced face.
pub fn solve_policy_step(
    sys: &MatchingSystem,
    obj: &Objective,
    lpf: &LyapunovModel,
    cfg: &LearnConfig,
) -> Result<PolicyStep> {
    let face = Face::new(sys);
    let lp = sys.ds_packed_len();
    let n = sys.n;
    let mut prob = ConicProblem::new();
    let p_off = prob.add_scalars(n * lp);
    obj.install(&mut prob, p_off);
    let g_off: Vec<usize> = lpf
        .blocks
        .iter()
        .map(|_| prob.add_matrix(face.dim, MatrixCone::Nsd { max_eig: -cfg.gram_margin }))
        .collect();
    for i in 0..n {
        prob.add_equality(vec![(p_off + i * lp, 1.0)], 0.0, format!("P{}[0,0]", i + 1));
    }
    let mut p_only = Vec::new();
    for (b, q) in lpf.blocks.iter().enumerate() {
        for r in sys.rows.iter().chain(&sys.residuals) {
            let mut terms: Vec<(usize, f64)> =
                r.terms.iter().map(|t| (p_off + t.block * lp + t.p, t.coef * q.packed()[t.q])).collect();
            let face_terms: Vec<(usize, f64)> = face
                .pairs(r)
                .map(|(k, l)| (g_off[b] + face.packed(k, l).unwrap(), -multiplicity(k, l)))
                .collect();
            if face_terms.is_empty() {
                if terms.is_empty() {
                    continue;
                }
                p_only.push((terms.iter().map(|&(i, c)| (i - p_off, c)).collect::<Vec<_>>(), -r.shift));
            }
            terms.extend(face_terms);
            prob.add_equality(terms, -r.shift, format!("block {}: {}", b + 1, r.monomial));
        }
    }
    for i in 0..n {
        p_only.push((vec![(i * lp, 1.0)], 0.0));
    }

    let sol = solve(&prob, &cfg.admm)?;
    warn_unconverged("policy step", sol.status, sol.iterations);
    let mut p = sol.x[p_off..p_off + n * lp].to_vec();
    project_affine(&mut p, &p_only)?;
    let len = sys.ds_spec.len();
    let p_blocks: Vec<SymMatrix> = (0..n).map(|i| packed_slice(&p, i * lp, len)).collect();
    let g_blocks = lpf
        .blocks
        .iter()
        .zip(&g_off)
        .map(|(q, &o)| polish_gram(sys, &face, q, &p_blocks, &packed_slice(&sol.z, o, face.dim)))
        .collect();
    Ok(PolicyStep { objective: obj.value(&p_blocks), p_blocks, g_blocks, iterations: sol.iterations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpfStep {
    pub lpf: LyapunovModel,
    pub g_blocks: Vec<SymMatrix>,
    /// `min_i -λ_max(G_i)` over the reduced face, after polishing.
    pub slack: f64,
    pub iterations: usize,
}

/// For a fixed policy, maximizes `s` such that some trace-normalized `Q ⪰ 0`
/// admits `G_i ⪯ -s·I` on the reduced face. Fails with
/// [`Error::NoCertificate`] when the best slack is not positive.
pub fn solve_lpf_step(sys: &MatchingSystem, p_blocks: &[SymMatrix], mode: LpfMode, cfg: &LearnConfig) -> Result<LpfStep> {
    let face = Face::new(sys);
    let nb = block_count(sys.n, mode);
    let lq = sys.lpf_spec.len();
    let qp = sys.lpf_packed_len();
    let mut prob = ConicProblem::new();
    let q_off: Vec<usize> =
        (0..nb).map(|_| prob.add_matrix(lq, MatrixCone::Psd { min_eig: cfg.lpf_margin })).collect();
    let w_off: Vec<usize> = (0..nb).map(|_| prob.add_matrix(face.dim, MatrixCone::Nsd { max_eig: 0.0 })).collect();
    let s = prob.add_scalars(1);
    prob.bounds[s] = (f64::NEG_INFINITY, SLACK_CAP);
    prob.lin[s] = -1.0;

    let mut q_only: Vec<Vec<SparseRow>> = vec![Vec::new(); nb];
    for b in 0..nb {
        for r in sys.rows.iter().chain(&sys.residuals) {
            let mut terms: Vec<(usize, f64)> =
                r.terms.iter().map(|t| (q_off[b] + t.q, t.coef * p_blocks[t.block].packed()[t.p])).collect();
            let mut diag = 0.0;
            let mut face_terms = Vec::new();
            for (k, l) in face.pairs(r) {
                face_terms.push((w_off[b] + face.packed(k, l).unwrap(), -multiplicity(k, l)));
                if k == l {
                    diag += 1.0;
                }
            }
            if face_terms.is_empty() {
                if terms.is_empty() {
                    continue;
                }
                q_only[b].push((terms.iter().map(|&(i, c)| (i - q_off[b], c)).collect(), -r.shift));
            }
            terms.extend(face_terms);
            if diag != 0.0 {
                terms.push((s, diag));
            }
            prob.add_equality(terms, -r.shift, format!("block {}: {}", b + 1, r.monomial));
        }
    }
    let trace_terms = q_off.iter().flat_map(|&o| (0..lq).map(move |k| (o + packed_index(lq, k, k), 1.0))).collect();
    prob.add_equality(trace_terms, (nb * lq) as f64, "trace normalization");

    let sol = solve(&prob, &cfg.admm)?;
    warn_unconverged("LPF step", sol.status, sol.iterations);
    let mut blocks = Vec::with_capacity(nb);
    let mut g_blocks = Vec::with_capacity(nb);
    let mut slack = f64::INFINITY;
    for b in 0..nb {
        let mut q = sol.z[q_off[b]..q_off[b] + qp].to_vec();
        project_affine(&mut q, &q_only[b])?;
        let q = SymMatrix::from_packed(lq, q).expect("packed length");
        let mut w = packed_slice(&sol.z, w_off[b], face.dim);
        for k in 0..face.dim {
            w.set(k, k, w.get(k, k) - sol.z[s]);
        }
        let g = polish_gram(sys, &face, &q, p_blocks, &w);
        slack = slack.min(-face_max_eig(&face, &g));
        blocks.push(q);
        g_blocks.push(g);
    }
    if !(slack > 0.0) {
        return Err(Error::NoCertificate { beta: sys.beta, slack });
    }
    let lpf = LyapunovModel::new(sys.n, sys.beta, sys.basis_mode, mode, blocks)?;
    Ok(LpfStep { lpf, g_blocks, slack, iterations: sol.iterations })
}

/// One trust-region step of the bilinear problem, linearized around `(P0, Q0)`.
fn sqp_candidate(
    sys: &MatchingSystem,
    obj: &Objective,
    p0: &[SymMatrix],
    lpf0: &LyapunovModel,
    radius: f64,
    cfg: &LearnConfig,
) -> Result<Vec<SymMatrix>> {
    let face = Face::new(sys);
    let lp = sys.ds_packed_len();
    let n = sys.n;
    let lq = sys.lpf_spec.len();
    let mut prob = ConicProblem::new();
    let p_off = prob.add_scalars(n * lp);
    obj.install(&mut prob, p_off);
    for (i, pi) in p0.iter().enumerate().take(n) {
        for idx in 0..lp {
            let c = pi.packed()[idx];
            prob.bounds[p_off + i * lp + idx] = if idx == 0 { (0.0, 0.0) } else { (c - radius, c + radius) };
        }
    }
    let nb = lpf0.blocks.len();
    let q_off: Vec<usize> =
        (0..nb).map(|_| prob.add_matrix(lq, MatrixCone::Psd { min_eig: cfg.lpf_margin })).collect();
    let g_off: Vec<usize> =
        (0..nb).map(|_| prob.add_matrix(face.dim, MatrixCone::Nsd { max_eig: -cfg.gram_margin })).collect();
    for (b, q0) in lpf0.blocks.iter().enumerate() {
        for r in sys.rows.iter().chain(&sys.residuals) {
            let mut terms = Vec::with_capacity(2 * r.terms.len());
            let mut rhs = -r.shift;
            for t in &r.terms {
                let qv = q0.packed()[t.q];
                let pv = p0[t.block].packed()[t.p];
                terms.push((p_off + t.block * lp + t.p, t.coef * qv));
                terms.push((q_off[b] + t.q, t.coef * pv));
                rhs += t.coef * qv * pv;
            }
            for (k, l) in face.pairs(r) {
                terms.push((g_off[b] + face.packed(k, l).unwrap(), -multiplicity(k, l)));
            }
            if terms.is_empty() {
                continue;
            }
            prob.add_equality(terms, rhs, format!("block {}: {}", b + 1, r.monomial));
        }
    }
    let trace_terms = q_off.iter().flat_map(|&o| (0..lq).map(move |k| (o + packed_index(lq, k, k), 1.0))).collect();
    prob.add_equality(trace_terms, (nb * lq) as f64, "trace normalization");
    let sol = solve(&prob, &cfg.admm)?;
    warn_unconverged("trust-region step", sol.status, sol.iterations);
    // Restore the rows the linearization cannot hold exactly, for the
    // candidate's own Q.
    let mut p = sol.z[p_off..p_off + n * lp].to_vec();
    let mut rows = Vec::new();
    for &o in &q_off {
        rows.extend(p_only_rows(sys, &face, &packed_slice(&sol.z, o, lq)));
    }
    for i in 0..n {
        rows.push((vec![(i * lp, 1.0)], 0.0));
    }
    project_affine(&mut p, &rows)?;
    let len = sys.ds_spec.len();
    Ok((0..n).map(|i| packed_slice(&p, i * lp, len)).collect())
}

/// Matching rows without on-face pairs, as linear equations in the packed
/// `P` entries for a fixed `Q` block.
fn p_only_rows(sys: &MatchingSystem, face: &Face, q: &SymMatrix) -> Vec<(Vec<(usize, f64)>, f64)> {
    let lp = sys.ds_packed_len();
    sys.rows
        .iter()
        .chain(&sys.residuals)
        .filter(|r| !r.terms.is_empty() && face.pairs(r).next().is_none())
        .map(|r| (r.terms.iter().map(|t| (t.block * lp + t.p, t.coef * q.packed()[t.q])).collect(), -r.shift))
        .collect()
}

/// Training diagnostics stored alongside the model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnMetrics {
    /// Final objective in the model frame.
    pub objective: f64,
    /// Training MSE in world units.
    pub train_mse: f64,
    pub alternations: usize,
    pub sqp_accepted: usize,
    /// Objective of every accepted iterate.
    pub history: Vec<f64>,
    pub solver_iterations: usize,
    pub matching_residual: f64,
    pub seconds: f64,
}

/// A certified policy with its LPF and certificate, as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedModel {
    pub schema: String,
    pub version: String,
    pub config: LearnConfig,
    pub policy: PolicyModel,
    pub lpf: LyapunovModel,
    pub certificate: StabilityCertificate,
    pub audit: AuditConfig,
    pub metrics: LearnMetrics,
}

impl LearnedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(dir) = path.as_ref().parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p)?;
        let m: LearnedModel = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: p.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if m.schema != MODEL_SCHEMA {
            return Err(Error::Parse { file: p.display().to_string(), line: 1, msg: format!("unsupported schema '{}'", m.schema) });
        }
        m.policy.validate()?;
        m.lpf.validate()?;
        Ok(m)
    }

    /// Re-runs the independent certificate check on the stored matrices.
    pub fn verify(&self) -> Result<crate::lyapunov::CertificateReport> {
        check_certificate(&self.policy, &self.lpf, &self.certificate, &self.audit)
    }
}

/// Model frame for a dataset: centered on the target and scaled by the
/// largest absolute coordinate. Returns the frame and the transformed data.
pub fn model_frame(data: &DemonstrationSet, normalize_velocities: bool) -> (Frame, DemonstrationSet) {
    let mut z = preprocess(data, normalize_velocities);
    let scale = z.samples().flat_map(|(x, _)| x.iter().map(|v| v.abs())).fold(0.0, f64::max);
    let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
    for d in &mut z.demos {
        for row in d.positions.iter_mut().chain(d.velocities.iter_mut()) {
            row.iter_mut().for_each(|v| *v /= scale);
        }
    }
    (Frame { target: data.target.clone(), scale }, z)
}

/// Audit box: the demonstration bounding box in the model frame, doubled about its center.
fn audit_box(z: &DemonstrationSet, points: usize, seed: u64) -> AuditConfig {
    let (lo, hi) = z.bounding_box();
    let mut alo = Vec::with_capacity(z.n);
    let mut ahi = Vec::with_capacity(z.n);
    for (a, b) in lo.iter().zip(&hi) {
        let c = 0.5 * (a + b);
        let h = (0.5 * (b - a)).max(1e-3);
        alo.push(c - 2.0 * h);
        ahi.push(c + 2.0 * h);
    }
    AuditConfig { lo: alo, hi: ahi, points, seed }
}

struct Iterate {
    p: Vec<SymMatrix>,
    lpf: LyapunovModel,
    cert: StabilityCertificate,
    objective: f64,
}

struct Learner<'a> {
    sys: MatchingSystem,
    obj: Objective,
    frame: Frame,
    audit: AuditConfig,
    cfg: &'a LearnConfig,
    iterations: usize,
}

impl Learner<'_> {
    fn policy(&self, p: Vec<SymMatrix>) -> Result<PolicyModel> {
        PolicyModel::new(self.sys.n, self.sys.alpha, self.sys.basis_mode, self.frame.clone(), p)
    }

    /// Certifies `(P, Q, G)` with the independent check; `None` when it fails.
    fn certify(&self, p: Vec<SymMatrix>, lpf: LyapunovModel, g: Vec<SymMatrix>) -> Result<Option<Iterate>> {
        let policy = self.policy(p)?;
        let mut cert = StabilityCertificate::new(g, self.cfg.tolerance, self.cfg.eps_pd);
        let report = check_certificate(&policy, &lpf, &cert, &self.audit)?;
        if !report.verdict.is_certified() {
            log::debug!("candidate rejected: {:?}", report.verdict);
            return Ok(None);
        }
        cert.report = Some(report);
        let objective = self.obj.value(&policy.blocks);
        Ok(Some(Iterate { p: policy.blocks, lpf, cert, objective }))
    }

    /// P-step for a fixed LPF. When the solver stops short and the polished
    /// Gram blocks leave the cone, the step is re-solved with a wider margin.
    fn policy_step(&mut self, lpf: &LyapunovModel) -> Result<Option<Iterate>> {
        let mut cfg = self.cfg.clone();
        for _ in 0..POLICY_RETRIES {
            let step = solve_policy_step(&self.sys, &self.obj, lpf, &cfg)?;
            self.iterations += step.iterations;
            let worst = step.g_blocks.iter().map(|g| g.eigen_extremes().1).fold(f64::NEG_INFINITY, f64::max);
            if worst <= 0.0 {
                return self.certify(step.p_blocks, lpf.clone(), step.g_blocks);
            }
            log::debug!("policy step left λ_max(G) = {worst:e}; widening the margin");
            cfg.gram_margin = (10.0 * cfg.gram_margin).max(100.0 * worst);
        }
        Ok(None)
    }

    fn lpf_step(&mut self, p: &[SymMatrix]) -> Result<Option<LpfStep>> {
        match solve_lpf_step(&self.sys, p, self.cfg.lpf_mode, self.cfg) {
            Ok(s) => {
                self.iterations += s.iterations;
                Ok(Some(s))
            }
            Err(Error::NoCertificate { slack, .. }) => {
                log::debug!("LPF step found no certificate (slack {slack:e})");
                Ok(None)
            }
            Err(Error::Infeasible { rows }) => {
                log::debug!("LPF step infeasible ({} rows)", rows.len());
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

/// Learns a certified policy from demonstrations.
///
/// The returned model is the last iterate that passed [`check_certificate`];
/// the objective is non-increasing along accepted iterates.
pub fn learn_policy(data: &DemonstrationSet, cfg: &LearnConfig) -> Result<LearnedModel> {
    cfg.validate()?;
    data.validate()?;
    match learn_in_basis(data, cfg) {
        Err(Error::Learning(msg)) if cfg.escalate_basis && cfg.basis_mode == BasisMode::Elementwise && data.n >= 3 => {
            log::warn!("element-wise basis failed ({msg}); retrying with the full monomial basis");
            learn_in_basis(data, &LearnConfig { basis_mode: BasisMode::Full, ..cfg.clone() })
        }
        r => r,
    }
}

fn learn_in_basis(data: &DemonstrationSet, cfg: &LearnConfig) -> Result<LearnedModel> {
    let start = Instant::now();
    let (frame, z) = model_frame(data, cfg.normalize_velocities);
    let sys = build_matching_system(cfg.alpha, cfg.beta, data.n, cfg.basis_mode, cfg.tolerance)?;
    let obj = assemble_objective(&z, cfg.alpha, cfg.basis_mode, cfg.lambda1, cfg.lambda2)?;
    let audit = audit_box(&z, cfg.audit_points, cfg.seed);
    let mut lr = Learner { sys, obj, frame, audit, cfg, iterations: 0 };

    let q0 = LyapunovModel::identity(data.n, cfg.beta, cfg.basis_mode, cfg.lpf_mode);
    let mut best = lr
        .policy_step(&q0)?
        .ok_or_else(|| Error::Learning("the initial policy step did not produce a certified iterate".into()))?;
    let mut history = vec![best.objective];
    let mut alternations = 0;

    while alternations < cfg.max_alternations {
        alternations += 1;
        let Some(step) = lr.lpf_step(&best.p)? else { break };
        let Some(next) = lr.policy_step(&step.lpf)? else { break };
        if next.objective > best.objective {
            break;
        }
        let gain = best.objective - next.objective;
        best = next;
        history.push(best.objective);
        if gain < cfg.tolerance {
            break;
        }
    }

    let mut accepted = 0;
    let p_norm = best.p.iter().map(SymMatrix::frobenius_sq).sum::<f64>().sqrt();
    let mut radius = (0.1 * p_norm).max(1e-3);
    for _ in 0..cfg.sqp_steps {
        let cand = sqp_candidate(&lr.sys, &lr.obj, &best.p, &best.lpf, radius, cfg)?;
        let improved = match lr.lpf_step(&cand)? {
            Some(step) => {
                match lr.certify(cand, step.lpf.clone(), step.g_blocks)? {
                    Some(it) if it.objective < best.objective - cfg.tolerance * 1e-3 => {
                        // refit P for the new LPF; keep whichever is better
                        let refit = lr.policy_step(&step.lpf)?.filter(|r| r.objective <= it.objective);
                        Some(refit.unwrap_or(it))
                    }
                    _ => None,
                }
            }
            _ => None,
        };
        match improved {
            Some(it) => {
                accepted += 1;
                best = it;
                history.push(best.objective);
            }
            None => radius *= 0.5,
        }
    }

    let policy = lr.policy(best.p.clone())?;
    let data_term = lr.obj.data_term(&policy.blocks);
    let matching_residual = best.cert.report.as_ref().map_or(f64::NAN, |r| r.matching_residual);
    let metrics = LearnMetrics {
        objective: best.objective,
        train_mse: data_term * lr.frame.scale * lr.frame.scale,
        alternations,
        sqp_accepted: accepted,
        history,
        solver_iterations: lr.iterations,
        matching_residual,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(LearnedModel {
        schema: MODEL_SCHEMA.into(),
        version: crate::VERSION.into(),
        config: cfg.clone(),
        policy,
        lpf: best.lpf,
        certificate: best.cert,
        audit: lr.audit,
        metrics,
    })
}
