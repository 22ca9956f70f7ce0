//! Forward simulation of policies: rollouts, pushed rollouts and streamline
//! grids, with CSV and SVG export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DemonstrationSet;
use crate::error::{check_dim, Error, Result};
use crate::model::PolicyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

impl std::str::FromStr for Integrator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            other => Err(Error::Input(format!("unknown integrator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub dt: f64,
    pub max_steps: usize,
    /// Distance to the target counted as converged, in world units.
    pub convergence_radius: f64,
    /// Escape box; unbounded when `None`.
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub integrator: Integrator,
}

impl RolloutConfig {
    pub fn new(dt: f64, max_steps: usize, convergence_radius: f64) -> Self {
        Self { dt, max_steps, convergence_radius, bounds: None, integrator: Integrator::Euler }
    }

    /// Defaults for a workspace box: `dt = 1e-2`, radius `1e-2·scale` where
    /// scale is the largest box side, escape box 4× the workspace about its
    /// center, at most 10⁵ steps.
    pub fn for_workspace(lo: &[f64], hi: &[f64]) -> Self {
        let scale = lo.iter().zip(hi).map(|(a, b)| b - a).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        Self {
            dt: 1e-2,
            max_steps: 100_000,
            convergence_radius: 1e-2 * scale,
            bounds: Some(expand_box(lo, hi, 4.0)),
            integrator: Integrator::Euler,
        }
    }

    pub fn with_bounds(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.bounds = Some((lo, hi));
        self
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Input(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.convergence_radius > 0.0) {
            return Err(Error::Input("convergence radius must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Input("max_steps must be at least 1".into()));
        }
        if let Some((lo, hi)) = &self.bounds {
            check_dim(n, lo.len())?;
            check_dim(n, hi.len())?;
        }
        Ok(())
    }
}

/// Box scaled by `factor` about its center.
pub fn expand_box(lo: &[f64], hi: &[f64], factor: f64) -> (Vec<f64>, Vec<f64>) {
    lo.iter()
        .zip(hi)
        .map(|(a, b)| {
            let c = 0.5 * (a + b);
            let h = 0.5 * (b - a) * factor;
            (c - h, c + h)
        })
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    StepLimit,
    EscapedBox,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::StepLimit => "step_limit",
            Termination::EscapedBox => "escaped_box",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub status: Termination,
}

impl Trajectory {
    /// Number of integration steps taken.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least the start state")
    }

    pub fn converged(&self) -> bool {
        self.status == Termination::Converged
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn finite_field(m: &PolicyModel, x: &[f64], step: usize) -> Result<Vec<f64>> {
    let f = m.field(x)?;
    if f.iter().all(|v| v.is_finite()) {
        Ok(f)
    } else {
        Err(Error::NonFinite { step })
    }
}

fn advance(m: &PolicyModel, x: &[f64], dt: f64, integrator: Integrator, step: usize) -> Result<Vec<f64>> {
    let axpy = |a: &[f64], s: f64, b: &[f64]| a.iter().zip(b).map(|(p, q)| p + s * q).collect::<Vec<f64>>();
    let k1 = finite_field(m, x, step)?;
    let next = match integrator {
        Integrator::Euler => axpy(x, dt, &k1),
        Integrator::Rk4 => {
            let k2 = finite_field(m, &axpy(x, 0.5 * dt, &k1), step)?;
            let k3 = finite_field(m, &axpy(x, 0.5 * dt, &k2), step)?;
            let k4 = finite_field(m, &axpy(x, dt, &k3), step)?;
            x.iter()
                .enumerate()
                .map(|(i, v)| v + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        }
    };
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFinite { step })
    }
}

pub fn integrate_rollout(m: &PolicyModel, x0: &[f64], cfg: &RolloutConfig) -> Result<Trajectory> {
    perturbed_rollout(m, x0, cfg, &[])
}

/// Rollout with pushes: at each listed step the offset is added to the state
/// before the update. Convergence is only declared once every push has been
/// applied.
pub fn perturbed_rollout(
    m: &PolicyModel,
    x0: &[f64],
    cfg: &RolloutConfig,
    perturbations: &[(usize, Vec<f64>)],
) -> Result<Trajectory> {
    check_dim(m.n, x0.len())?;
    cfg.validate(m.n)?;
    for (step, offset) in perturbations {
        check_dim(m.n, offset.len())?;
        if *step >= cfg.max_steps {
            return Err(Error::Input(format!("perturbation step {step} is beyond max_steps {}", cfg.max_steps)));
        }
    }
    let last_push = perturbations.iter().map(|(s, _)| *s).max();
    let target = &m.frame.target;
    let outside = |x: &[f64]| {
        cfg.bounds
            .as_ref()
            .is_some_and(|(lo, hi)| x.iter().zip(lo.iter().zip(hi)).any(|(v, (a, b))| v < a || v > b))
    };

    let mut x = x0.to_vec();
    let mut traj = Trajectory { dt: cfg.dt, times: vec![0.0], states: vec![x.clone()], status: Termination::StepLimit };
    if last_push.is_none() && distance(&x, target) <= cfg.convergence_radius {
        traj.status = Termination::Converged;
        return Ok(traj);
    }
    for k in 0..cfg.max_steps {
        for (_, offset) in perturbations.iter().filter(|(s, _)| *s == k) {
            for (xi, o) in x.iter_mut().zip(offset) {
                *xi += o;
            }
        }
        x = advance(m, &x, cfg.dt, cfg.integrator, k)?;
        traj.times.push((k + 1) as f64 * cfg.dt);
        traj.states.push(x.clone());
        let pushes_done = last_push.is_none_or(|s| k >= s);
        if pushes_done && distance(&x, target) <= cfg.convergence_radius {
            traj.status = Termination::Converged;
            return Ok(traj);
        }
        if outside(&x) {
            traj.status = Termination::EscapedBox;
            return Ok(traj);
        }
    }
    Ok(traj)
}

/// Field samples on a grid and one rollout per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Streamlines {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub resolution: usize,
    /// `(point, field value)` in row-major grid order.
    pub field: Vec<(Vec<f64>, Vec<f64>)>,
    pub trajectories: Vec<Trajectory>,
}

impl Streamlines {
    pub fn converged_fraction(&self) -> f64 {
        let c = self.trajectories.iter().filter(|t| t.converged()).count();
        c as f64 / self.trajectories.len().max(1) as f64
    }
}

/// Grid of `resolution × resolution` seeds over `[lo, hi]` (planar models only).
pub fn grid_points(lo: &[f64], hi: &[f64], resolution: usize) -> Vec<Vec<f64>> {
    let r = resolution.max(2);
    let coord = |i: usize, k: usize| lo[i] + (hi[i] - lo[i]) * k as f64 / (r - 1) as f64;
    (0..r).flat_map(|a| (0..r).map(move |b| vec![coord(0, b), coord(1, a)])).collect()
}

pub fn streamline_field(
    m: &PolicyModel,
    lo: &[f64],
    hi: &[f64],
    resolution: usize,
    cfg: &RolloutConfig,
) -> Result<Streamlines> {
    if m.n != 2 {
        return Err(Error::UnsupportedDimension(m.n));
    }
    check_dim(2, lo.len())?;
    check_dim(2, hi.len())?;
    if resolution < 2 {
        return Err(Error::Input("grid resolution must be at least 2".into()));
    }
    let seeds = grid_points(lo, hi, resolution);
    let field = seeds.iter().map(|p| Ok((p.clone(), m.field(p)?))).collect::<Result<Vec<_>>>()?;
    let trajectories = seeds.par_iter().map(|p| integrate_rollout(m, p, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(Streamlines { lo: lo.to_vec(), hi: hi.to_vec(), resolution, field, trajectories })
}

fn header(n: usize) -> String {
    std::iter::once("t".to_string()).chain((1..=n).map(|i| format!("x{i}"))).collect::<Vec<_>>().join(",")
}

/// CSV with a `#` provenance line and header `t,x1..xn`.
pub fn trajectory_csv(t: &Trajectory, provenance: &str) -> String {
    let n = t.states.first().map_or(0, Vec::len);
    let mut out = comment_lines(provenance);
    let _ = writeln!(out, "# status: {}", t.status);
    let _ = writeln!(out, "{}", header(n));
    for (time, x) in t.times.iter().zip(&t.states) {
        let row: Vec<String> = std::iter::once(*time).chain(x.iter().copied()).map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn write_trajectory_csv(t: &Trajectory, path: impl AsRef<Path>, provenance: &str) -> Result<()> {
    fs::write(path, trajectory_csv(t, provenance))?;
    Ok(())
}

fn comment_lines(provenance: &str) -> String {
    provenance.lines().map(|l| format!("# {l}\n")).collect()
}

/// Field samples as `x1,x2,f1,f2`.
pub fn field_csv(s: &Streamlines, provenance: &str) -> String {
    let mut out = format!("{}x1,x2,f1,f2\n", comment_lines(provenance));
    for (p, f) in &s.field {
        let _ = writeln!(out, "{},{},{},{}", p[0], p[1], f[0], f[1]);
    }
    out
}

/// Every rollout as `seed,t,x1,x2`, where `seed` is the grid index.
pub fn rollouts_csv(s: &Streamlines, provenance: &str) -> String {
    let mut out = format!("{}seed,t,x1,x2\n", comment_lines(provenance));
    for (k, t) in s.trajectories.iter().enumerate() {
        for (time, x) in t.times.iter().zip(&t.states) {
            let _ = writeln!(out, "{k},{time},{},{}", x[0], x[1]);
        }
    }
    out
}

/// Writes `field.csv`, `rollouts.csv` and `streamlines.svg` into `dir`.
pub fn write_streamlines(
    s: &Streamlines,
    demos: Option<&DemonstrationSet>,
    dir: impl AsRef<Path>,
    provenance: &str,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("field.csv"), field_csv(s, provenance))?;
    fs::write(dir.join("rollouts.csv"), rollouts_csv(s, provenance))?;
    fs::write(dir.join("streamlines.svg"), render_svg(s, demos, provenance))?;
    Ok(())
}

const SVG_SIZE: f64 = 600.0;
const SVG_MAX_POINTS: usize = 400;

/// Standalone SVG: field arrows (`class="field"`), rollouts
/// (`class="rollout"`) and optional demonstrations (`class="demo"`).
pub fn render_svg(s: &Streamlines, demos: Option<&DemonstrationSet>, provenance: &str) -> String {
    let (lo, hi) = (&s.lo, &s.hi);
    let w = (hi[0] - lo[0]).max(f64::MIN_POSITIVE);
    let h = (hi[1] - lo[1]).max(f64::MIN_POSITIVE);
    let px = |x: &[f64]| ((x[0] - lo[0]) / w * SVG_SIZE, SVG_SIZE - (x[1] - lo[1]) / h * SVG_SIZE);
    let polyline = |pts: &[Vec<f64>]| {
        let stride = (pts.len() / SVG_MAX_POINTS).max(1);
        pts.iter()
            .step_by(stride)
            .chain(pts.last())
            .map(|p| {
                let (a, b) = px(p);
                format!("{a:.2},{b:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
    );
    let _ = writeln!(out, "<!-- {} -->", provenance.replace("--", "- -"));
    out.push_str(
        "<defs><marker id=\"head\" markerWidth=\"6\" markerHeight=\"6\" refX=\"5\" refY=\"3\" orient=\"auto\">\
         <path d=\"M0,0 L6,3 L0,6 z\" fill=\"#999\"/></marker></defs>\n",
    );
    out.push_str(
        "<style>.field{stroke:#999;stroke-width:1}.rollout{fill:none;stroke:#c0392b;stroke-width:1}\
         .demo{fill:none;stroke:#2c3e50;stroke-width:2;stroke-dasharray:4 2}</style>\n",
    );
    let cell = SVG_SIZE / s.resolution.max(2) as f64 * 0.8;
    let fmax = s.field.iter().map(|(_, f)| f[0].hypot(f[1])).fold(0.0, f64::max);
    for (p, f) in &s.field {
        let norm = f[0].hypot(f[1]);
        if norm == 0.0 || fmax == 0.0 {
            continue;
        }
        let (a, b) = px(p);
        let len = cell * (0.3 + 0.7 * norm / fmax);
        let (dx, dy) = (f[0] / norm * len, -f[1] / norm * len);
        let _ = writeln!(
            out,
            r#"<line class="field" x1="{a:.2}" y1="{b:.2}" x2="{:.2}" y2="{:.2}" marker-end="url(#head)"/>"#,
            a + dx,
            b + dy
        );
    }
    for t in &s.trajectories {
        let _ = writeln!(out, r#"<polyline class="rollout" points="{}"/>"#, polyline(&t.states));
    }
    if let Some(d) = demos.filter(|d| d.n == 2) {
        for demo in &d.demos {
            let _ = writeln!(out, r#"<polyline class="demo" points="{}"/>"#, polyline(&demo.positions));
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sym::SymMatrix;

    /// `ẋ = -x` in `n` dimensions.
    fn linear(n: usize) -> PolicyModel {
        let blocks = (0..n)
            .map(|i| {
                let mut p = SymMatrix::zeros(n + 1);
                p.set(0, i + 1, -0.5);
                p
            })
            .collect();
        PolicyModel::unit_frame(n, 1, blocks).unwrap()
    }

    #[test]
    fn euler_examples() {
        let m = linear(1);
        let t = integrate_rollout(&m, &[1.0], &RolloutConfig::new(0.1, 1, 1e-9)).unwrap();
        assert!((t.states[1][0] - 0.9).abs() < 1e-15);
        assert_eq!(t.status, Termination::StepLimit);

        // closed form: 0.99^k ≤ 0.01  ⇔  k ≥ ln 0.01 / ln 0.99
        let expected = (0.01f64.ln() / 0.99f64.ln()).ceil() as usize;
        let t = integrate_rollout(&m, &[1.0], &RolloutConfig::new(0.01, 10_000, 1e-2)).unwrap();
        assert!(t.converged());
        assert_eq!(t.steps(), expected);

        let t = integrate_rollout(&m, &[0.0], &RolloutConfig::new(0.01, 10, 1e-2)).unwrap();
        assert!(t.converged());
        assert_eq!(t.steps(), 0);
    }

    #[test]
    fn rk4_step_matches_exponential() {
        let m = linear(1);
        let cfg = RolloutConfig::new(0.1, 1, 1e-9).with_integrator(Integrator::Rk4);
        let t = integrate_rollout(&m, &[1.0], &cfg).unwrap();
        assert!((t.states[1][0] - (-0.1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn perturbation_examples() {
        let m = linear(1);
        let cfg = RolloutConfig::new(0.01, 10_000, 1e-2);
        assert_eq!(perturbed_rollout(&m, &[1.0], &cfg, &[]).unwrap(), integrate_rollout(&m, &[1.0], &cfg).unwrap());
        let t = perturbed_rollout(&m, &[1.0], &cfg, &[(100, vec![10.0])]).unwrap();
        assert!(t.converged());
        assert!(t.states[101][0] > 10.0);
        let boxed = cfg.clone().with_bounds(vec![-5.0], vec![5.0]);
        let t = perturbed_rollout(&m, &[1.0], &boxed, &[(100, vec![10.0])]).unwrap();
        assert_eq!(t.status, Termination::EscapedBox);
        assert!(perturbed_rollout(&m, &[1.0], &cfg, &[(10_000, vec![1.0])]).is_err());
    }

    #[test]
    fn pending_push_delays_convergence() {
        let m = linear(1);
        let cfg = RolloutConfig::new(0.01, 10_000, 1e-2);
        let t = perturbed_rollout(&m, &[0.0], &cfg, &[(50, vec![1.0])]).unwrap();
        assert!(t.converged());
        assert!(t.steps() > 50);
    }

    #[test]
    fn non_finite_field_is_an_error() {
        // ẋ = x² blows up in finite time
        let mut p = SymMatrix::zeros(2);
        p.set(1, 1, 1.0);
        let m = PolicyModel::unit_frame(1, 1, vec![p]).unwrap();
        let r = integrate_rollout(&m, &[10.0], &RolloutConfig::new(1.0, 100, 1e-3));
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn streamline_examples() {
        let m = linear(2);
        let cfg = RolloutConfig::new(0.01, 10_000, 1e-2);
        let s = streamline_field(&m, &[-1.0, -1.0], &[1.0, 1.0], 5, &cfg).unwrap();
        assert_eq!(s.trajectories.len(), 25);
        assert_eq!(s.converged_fraction(), 1.0);
        // the center of an odd grid is the origin
        assert_eq!(s.trajectories[12].steps(), 0);
        assert!(matches!(
            streamline_field(&linear(3), &[-1.0; 3], &[1.0; 3], 5, &cfg),
            Err(Error::UnsupportedDimension(3))
        ));
    }

    #[test]
    fn exports_are_well_formed() {
        let m = linear(2);
        let cfg = RolloutConfig::new(0.05, 1000, 1e-2);
        let s = streamline_field(&m, &[-1.0, -1.0], &[1.0, 1.0], 3, &cfg).unwrap();
        let csv = trajectory_csv(&s.trajectories[0], "model=test");
        assert!(csv.starts_with("# model=test\n"));
        assert!(csv.lines().any(|l| l == "t,x1,x2"));
        let svg = render_svg(&s, None, "model=test");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("class=\"rollout\"").count(), 9);
        assert_eq!(svg.matches("class=\"field\"").count(), 8);
    }
}
