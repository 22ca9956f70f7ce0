//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use plyds_core::data::{synth_generate, DemonstrationSet, SynthKind, SynthSpec};
use plyds_core::eval::{degree_sweep, noise_sweep, run_protocol, EvalConfig};
use plyds_core::learn::{learn_policy, LearnConfig, LearnedModel};
use plyds_core::lyapunov::{audit_lpf, AuditConfig};
use plyds_core::rollout::{expand_box, integrate_rollout, perturbed_rollout, RolloutConfig};
use plyds_core::{
    aggregate_lpf, eval_gram, expand_gram, BasisMode, BasisSpec, GramPolynomial, LpfMode, Monomial, SymMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Fitted {
    name: String,
    data: DemonstrationSet,
    model: LearnedModel,
}

fn config(seed: u64) -> LearnConfig {
    LearnConfig { seed, ..LearnConfig::default() }
}

fn synth(kind: SynthKind, n: usize, demos: usize, samples: usize, seed: u64) -> DemonstrationSet {
    synth_generate(&SynthSpec::new(kind, n, demos, samples, seed)).expect("synthetic data")
}

/// Models learned on the synthetic motions, shared by the certificate,
/// convergence, perturbation and aggregation criteria.
fn zoo() -> Vec<Fitted> {
    let cases: Vec<(&str, DemonstrationSet, LearnConfig)> = vec![
        ("linear-1d", synth(SynthKind::Linear, 1, 5, 200, 11), config(1)),
        ("cubic-1d", synth(SynthKind::Cubic, 1, 5, 200, 12), config(2)),
        ("linear-2d", synth(SynthKind::Linear, 2, 5, 200, 13), config(3)),
        ("sine-2d", synth(SynthKind::Sine, 2, 7, 200, 14), config(4)),
        ("cubic-2d", synth(SynthKind::Cubic, 2, 5, 200, 15), config(5)),
        ("sine-2d-scalar", synth(SynthKind::Sine, 2, 7, 200, 16), LearnConfig { lpf_mode: LpfMode::Scalar, ..config(6) }),
        ("cubic-2d-beta2", synth(SynthKind::Cubic, 2, 5, 200, 17), LearnConfig { beta: 2, ..config(7) }),
        ("linear-3d", synth(SynthKind::Linear, 3, 4, 150, 18), config(8)),
    ];
    cases
        .into_iter()
        .map(|(name, data, cfg)| {
            let model = learn_policy(&data, &cfg).unwrap_or_else(|e| panic!("{name}: learning failed: {e}"));
            Fitted { name: name.into(), data, model }
        })
        .collect()
}

/// `[x, x∘2, …, x∘d]`, with a leading 1 when `constant`.
fn ew_basis(z: &[f64], degree: usize, constant: bool) -> Vec<f64> {
    let mut b = Vec::new();
    if constant {
        b.push(1.0);
    }
    for p in 1..=degree {
        b.extend(z.iter().map(|v| v.powi(p as i32)));
    }
    b
}

/// Jacobian of the reduced element-wise basis, row per basis entry.
fn ew_basis_jacobian(z: &[f64], degree: usize) -> Vec<Vec<f64>> {
    let n = z.len();
    let mut rows = Vec::new();
    for p in 1..=degree {
        for i in 0..n {
            let mut r = vec![0.0; n];
            r[i] = p as f64 * z[i].powi(p as i32 - 1);
            rows.push(r);
        }
    }
    rows
}

fn quad(m: &DMatrix<f64>, b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..b.len() {
        for l in 0..b.len() {
            s += m[(k, l)] * b[k] * b[l];
        }
    }
    s
}

fn eig(m: &SymMatrix) -> (f64, f64) {
    let e = SymmetricEigen::new(m.to_dmatrix()).eigenvalues;
    (e.min(), e.max())
}

/// Independent certificate check in the model frame: eigenvalues, the
/// identity `v̇_i + ε‖z‖² = b(z)ᵀ G_i b(z)` at random points, and strict
/// decrease at the audit points.
fn independent_check(f: &Fitted) -> std::result::Result<String, String> {
    let m = &f.model;
    let (p, q, g) = (&m.policy, &m.lpf, &m.certificate);
    if p.basis_mode != BasisMode::Elementwise {
        return Err("oracle only covers the element-wise basis".into());
    }
    let n = p.n;
    let q_min = q.blocks.iter().map(|b| eig(b).0).fold(f64::INFINITY, f64::min);
    let g_max = g.g_blocks.iter().map(|b| eig(b).1).fold(f64::NEG_INFINITY, f64::max);
    if q_min < 1e-8 {
        return Err(format!("λ_min(Q) = {q_min:e}"));
    }
    if g_max > 0.0 {
        return Err(format!("λ_max(G) = {g_max:e}"));
    }
    let report = m.verify().map_err(|e| e.to_string())?;
    if report.matching_residual > 1e-8 {
        return Err(format!("matching residual {:e}", report.matching_residual));
    }

    let qs: Vec<DMatrix<f64>> = q.blocks.iter().map(SymMatrix::to_dmatrix).collect();
    let gs: Vec<DMatrix<f64>> = g.g_blocks.iter().map(SymMatrix::to_dmatrix).collect();
    let ps: Vec<DMatrix<f64>> = p.blocks.iter().map(SymMatrix::to_dmatrix).collect();
    let field = |z: &[f64]| -> Vec<f64> {
        let b = ew_basis(z, p.alpha, true);
        ps.iter().map(|pm| quad(pm, &b)).collect()
    };
    let vdot = |qm: &DMatrix<f64>, z: &[f64]| -> f64 {
        // ∇(bᵀQb) = 2 Jᵀ Q b
        let b = ew_basis(z, q.beta, false);
        let jac = ew_basis_jacobian(z, q.beta);
        let f = field(z);
        let qb = qm * nalgebra::DVector::from_column_slice(&b);
        (0..n).map(|j| 2.0 * (0..b.len()).map(|k| jac[k][j] * qb[k]).sum::<f64>() * f[j]).sum()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_identity: f64 = 0.0;
    for _ in 0..200 {
        let z: Vec<f64> = m.audit.lo.iter().zip(&m.audit.hi).map(|(a, b)| rng.gen_range(*a..=*b)).collect();
        let norm_sq: f64 = z.iter().map(|v| v * v).sum();
        let bd = ew_basis(&z, p.alpha + q.beta, false);
        for (qm, gm) in qs.iter().zip(&gs) {
            let lhs = vdot(qm, &z) + g.eps_decrease * norm_sq;
            let rhs = quad(gm, &bd);
            let mag: f64 = (0..bd.len())
                .flat_map(|k| (0..bd.len()).map(move |l| (k, l)))
                .map(|(k, l)| (gm[(k, l)] * bd[k] * bd[l]).abs())
                .sum();
            worst_identity = worst_identity.max((lhs - rhs).abs() / (1.0 + mag));
        }
    }
    if worst_identity > 1e-8 {
        return Err(format!("pointwise identity violated by {worst_identity:e}"));
    }

    let audit = AuditConfig { seed: 1234, ..m.audit.clone() };
    for z in audit.sample_points() {
        for (i, qm) in qs.iter().enumerate() {
            let v = quad(qm, &ew_basis(&z, q.beta, false));
            let d = vdot(qm, &z);
            if !(v > 0.0 && d < 0.0) {
                return Err(format!("block {i} at {z:?}: v = {v:e}, v̇ = {d:e}"));
            }
        }
    }
    Ok(format!("λ_min(Q) {q_min:.1e}, λ_max(G) {g_max:.1e}, residual {:.1e}", report.matching_residual))
}

fn criterion_1(zoo: &[Fitted]) -> Outcome {
    let mut bad = Vec::new();
    for f in zoo {
        if let Err(e) = independent_check(f) {
            bad.push(format!("{}: {e}", f.name));
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { format!("{} models verified", zoo.len()) } else { bad.join("; ") })
}

/// Naive expansion: Σ B_kl m_k m_l evaluated monomial by monomial.
fn naive_gram(spec: &BasisSpec, b: &SymMatrix, x: &[f64]) -> (f64, f64) {
    let monos: Vec<Monomial> = spec.monomials();
    let vals: Vec<f64> = monos.iter().map(|m| m.0.iter().zip(x).map(|(e, v)| v.powi(*e as i32)).product()).collect();
    let mut s = 0.0;
    let mut mag = 0.0;
    for k in 0..vals.len() {
        for l in 0..vals.len() {
            let t = b.get(k, l) * vals[k] * vals[l];
            s += t;
            mag += t.abs();
        }
    }
    (s, mag)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=3);
        let degree = rng.gen_range(1..=4);
        let mode = if rng.gen_bool(0.5) { BasisMode::Elementwise } else { BasisMode::Full };
        let spec = BasisSpec::new(n, degree, rng.gen_bool(0.5)).with_mode(mode);
        let len = spec.len();
        let packed = (0..len * (len + 1) / 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let matrix = SymMatrix::from_packed(len, packed).unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gp = GramPolynomial::new(spec, matrix.clone()).unwrap();
        let direct = eval_gram(&gp, &x).unwrap();
        let expanded = expand_gram(&gp).evaluate(&x).unwrap();
        let (oracle, mag) = naive_gram(&spec, &matrix, &x);
        // relative to the magnitude of the summed terms, which bounds cancellation
        let scale = mag.max(f64::MIN_POSITIVE);
        worst = worst.max((direct - expanded).abs() / scale).max((direct - oracle).abs() / scale);
    }
    outcome(worst <= 1e-9, format!("worst relative gap {worst:.1e} over 1000 instances"))
}

fn criterion_3() -> Outcome {
    let data = synth(SynthKind::Linear, 2, 5, 200, 3);
    let cfg = EvalConfig { seeds: 20, learn: config(0), ..EvalConfig::default() };
    let r = run_protocol(&data, &cfg, "synthetic linear").expect("protocol");
    let (mean, std) = r.mean_std();
    let cert = r.certified_count();
    let pass = mean <= 1e-5 && std <= 1e-5 && cert == 20 && r.mses().len() == 20;
    outcome(pass, format!("mean MSE {mean:.2e}, std {std:.2e}, certified {cert}/20"))
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter().zip(hi).map(|(a, b)| rng.gen_range(*a..=*b)).collect()
}

fn euler(data: &DemonstrationSet) -> RolloutConfig {
    let scale = data.scale();
    RolloutConfig { bounds: None, ..RolloutConfig::new(1e-2, 100_000, 1e-2 * scale) }
}

fn criterion_4(zoo: &[Fitted]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut parts = Vec::new();
    let mut pass = true;
    for f in zoo.iter().filter(|f| f.data.n == 2 && f.model.certificate.is_certified()) {
        let (lo, hi) = f.data.bounding_box();
        let (blo, bhi) = expand_box(&lo, &hi, 2.0);
        let cfg = euler(&f.data);
        let ok = (0..100)
            .filter(|_| {
                let x0 = uniform_in(&mut rng, &blo, &bhi);
                integrate_rollout(&f.model.policy, &x0, &cfg).is_ok_and(|t| t.converged())
            })
            .count();
        pass &= ok == 100;
        parts.push(format!("{} {ok}/100", f.name));
    }
    outcome(pass && !parts.is_empty(), parts.join(", "))
}

fn criterion_5(zoo: &[Fitted]) -> Outcome {
    let models: Vec<&Fitted> = zoo.iter().filter(|f| f.data.n == 2 && f.model.certificate.is_certified()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = 0;
    let trials = 50;
    for t in 0..trials {
        let f = models[t % models.len()];
        let (lo, hi) = f.data.bounding_box();
        let radius = 0.5 * lo.iter().zip(&hi).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
        let x0 = uniform_in(&mut rng, &lo, &hi);
        let pushes: Vec<(usize, Vec<f64>)> = (0..5)
            .map(|_| {
                let step = rng.gen_range(1..1000);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let mag = rng.gen_range(0.0..=radius);
                (step, vec![mag * angle.cos(), mag * angle.sin()])
            })
            .collect();
        if perturbed_rollout(&f.model.policy, &x0, &euler(&f.data), &pushes).is_ok_and(|t| t.converged()) {
            ok += 1;
        }
    }
    outcome(ok == trials, format!("{ok}/{trials} pushed rollouts converged"))
}

fn criterion_6() -> Outcome {
    let data = synth(SynthKind::Cubic, 2, 5, 200, 6);
    let cfg = EvalConfig { seeds: 10, learn: config(0), ..EvalConfig::default() };
    let sweep = degree_sweep(&data, &[1, 3], &[1], &cfg, "synthetic cubic").expect("sweep");
    let m1 = sweep.cell(1, 1).unwrap().median_mse();
    let m3 = sweep.cell(3, 1).unwrap().median_mse();
    outcome(m3 <= m1, format!("median MSE α=1 {m1:.3e}, α=3 {m3:.3e}"))
}

fn criterion_7(zoo: &[Fitted]) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    let mut count = 0;
    for f in zoo.iter().filter(|f| f.model.lpf.mode == LpfMode::Vector && f.model.certificate.is_certified()) {
        let agg = aggregate_lpf(&f.model.lpf).expect("aggregate");
        let audit = AuditConfig { points: 1000, seed: 77, ..f.model.audit.clone() };
        let s = audit_lpf(&agg, &f.model.policy, 0.0, &audit).expect("audit");
        count += 1;
        if !(s.positive_pass == 1000 && s.decrease_pass == 1000) {
            pass = false;
            parts.push(format!("{}: positive {}/1000, decrease {}/1000", f.name, s.positive_pass, s.decrease_pass));
        }
    }
    if pass {
        parts.push(format!("{count} aggregated LPFs pass 1000/1000"));
    }
    outcome(pass && count > 0, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let data = synth(SynthKind::Sine, 2, 1, 1000, 8);
    let model = match learn_policy(&data, &config(8)) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("learning failed: {e}")),
    };
    let x0 = data.demos[0].positions[0].clone();
    let t = integrate_rollout(&model.policy, &x0, &euler(&data));
    let certified = model.certificate.is_certified();
    match t {
        Ok(t) => outcome(
            certified && t.converged(),
            format!("certified {certified}, rollout {} after {} steps", t.status, t.steps()),
        ),
        Err(e) => outcome(false, format!("rollout failed: {e}")),
    }
}

fn criterion_9() -> Outcome {
    let data = synth(SynthKind::Sine, 2, 7, 200, 9);
    let cfg = EvalConfig { seeds: 10, learn: config(0), ..EvalConfig::default() };
    let rows = noise_sweep(&data, &[0.0, 2.0, 4.0], &cfg, "synthetic sine").expect("noise sweep");
    let medians: Vec<f64> = rows.iter().map(|r| r.report.median_mse()).collect();
    let rate = rows[1].report.certification_rate();
    let monotone = medians.windows(2).all(|w| w[0] <= w[1]);
    outcome(
        rate >= 0.8 && monotone,
        format!(
            "certified at level 2: {:.0}%, median MSE {:.3e} / {:.3e} / {:.3e}",
            rate * 100.0,
            medians[0],
            medians[1],
            medians[2]
        ),
    )
}

fn criterion_10() -> Outcome {
    let data = synth(SynthKind::Sine, 2, 7, 1000, 10);
    let start = Instant::now();
    let r = learn_policy(&data, &config(10));
    let secs = start.elapsed().as_secs_f64();
    match r {
        Ok(m) => outcome(secs < 60.0 && m.certificate.is_certified(), format!("7×1000 samples learned in {secs:.1} s")),
        Err(e) => outcome(false, format!("learning failed after {secs:.1} s: {e}")),
    }
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let start = Instant::now();
    let zoo = zoo();
    println!("learned {} reference models in {:.1} s", zoo.len(), start.elapsed().as_secs_f64());
    let criteria: Vec<(&str, Criterion<'_>)> = vec![
        ("certificate suite", Box::new(|| criterion_1(&zoo))),
        ("gram oracle equivalence", Box::new(criterion_2)),
        ("linear recovery", Box::new(criterion_3)),
        ("global convergence", Box::new(|| criterion_4(&zoo))),
        ("perturbation recovery", Box::new(|| criterion_5(&zoo))),
        ("degree sweep", Box::new(criterion_6)),
        ("aggregated scalar LPF", Box::new(|| criterion_7(&zoo))),
        ("single demonstration", Box::new(criterion_8)),
        ("noise robustness", Box::new(criterion_9)),
        ("runtime envelope", Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        failed += !o.pass as usize;
        println!(
            "criterion {:>2} {:<24} {}  {} ({:.1} s)",
            k + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
