//! Demonstration datasets: on-disk format, validation, preprocessing and
//! synthetic generators with known stable ground-truth fields.
//!
//! A dataset directory holds `manifest.json` (schema `plyds-data/1`) and one
//! CSV per demonstration with header `x1..xn,v1..vn` and exactly `N_s` rows.
//! Lines starting with `#` are comments.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const DATA_SCHEMA: &str = "plyds-data/1";

/// Endpoint tolerance relative to the dataset scale.
pub const TARGET_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    /// Index of the demonstration in the originating set.
    pub id: usize,
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub units: String,
    #[serde(default)]
    pub source: String,
    /// Sample spacing in time units, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default)]
    pub normalized_velocities: bool,
    /// Description of the generating field for synthetic sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub n: usize,
    pub target: Vec<f64>,
    pub demos: Vec<Demonstration>,
    pub meta: DataMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema: String,
    #[serde(default)]
    version: String,
    n: usize,
    n_samples: usize,
    target: Vec<f64>,
    #[serde(default)]
    units: String,
    names: Vec<String>,
    #[serde(default)]
    name: String,
    #[serde(default)]
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
    #[serde(default)]
    normalized_velocities: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    #[default]
    Strict,
    /// Assumption violations are logged and the final samples re-pinned to
    /// the mean endpoint.
    Lenient,
}

impl DemonstrationSet {
    pub fn n_demos(&self) -> usize {
        self.demos.len()
    }

    /// Samples per demonstration (`N_s`); zero for an empty set.
    pub fn n_samples(&self) -> usize {
        self.demos.first().map_or(0, Demonstration::len)
    }

    /// Total number of state-velocity pairs (`N_t`).
    pub fn n_total(&self) -> usize {
        self.demos.iter().map(Demonstration::len).sum()
    }

    pub fn samples(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.demos
            .iter()
            .flat_map(|d| d.positions.iter().zip(&d.velocities).map(|(x, v)| (x.as_slice(), v.as_slice())))
    }

    /// Per-coordinate bounds of all positions.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.n];
        let mut hi = vec![f64::NEG_INFINITY; self.n];
        for (x, _) in self.samples() {
            for i in 0..self.n {
                lo[i] = lo[i].min(x[i]);
                hi[i] = hi[i].max(x[i]);
            }
        }
        (lo, hi)
    }

    /// Largest coordinate range of the positions; 1 for degenerate sets.
    pub fn scale(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        let s = lo.iter().zip(&hi).map(|(a, b)| b - a).fold(0.0, f64::max);
        if s.is_finite() && s > 0.0 {
            s
        } else {
            1.0
        }
    }

    /// Checks shapes and the common-target / zero-final-velocity assumptions.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        let violations = self.assumption_violations();
        if let Some(first) = violations.first() {
            return Err(Error::Validation(first.clone()));
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<()> {
        if self.demos.is_empty() {
            return Err(Error::Validation("dataset has no demonstrations".into()));
        }
        check_dim(self.n, self.target.len())?;
        let ns = self.n_samples();
        if ns == 0 {
            return Err(Error::Validation("demonstrations have no samples".into()));
        }
        for (k, d) in self.demos.iter().enumerate() {
            if d.positions.len() != ns || d.velocities.len() != ns {
                return Err(Error::Validation(format!(
                    "demonstration {k} has {} samples, expected {ns}",
                    d.positions.len()
                )));
            }
            for row in d.positions.iter().chain(&d.velocities) {
                check_dim(self.n, row.len())?;
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!("demonstration {k} has a non-finite value")));
                }
            }
        }
        Ok(())
    }

    fn assumption_violations(&self) -> Vec<String> {
        let tol = TARGET_TOLERANCE * self.scale();
        let mut out = Vec::new();
        for (k, d) in self.demos.iter().enumerate() {
            let end = d.positions.last().unwrap();
            let dist = norm(&sub(end, &self.target));
            if dist > tol {
                out.push(format!(
                    "demonstration {k} ends {dist:.6} from the target (tolerance {tol:.6})"
                ));
            }
            let speed = norm(d.velocities.last().unwrap());
            if speed > tol {
                out.push(format!("demonstration {k} has final speed {speed:.6} (tolerance {tol:.6})"));
            }
        }
        out
    }

    fn repin_to_mean_endpoint(&mut self) {
        let mut mean = vec![0.0; self.n];
        for d in &self.demos {
            for (m, v) in mean.iter_mut().zip(d.positions.last().unwrap()) {
                *m += v / self.demos.len() as f64;
            }
        }
        for d in &mut self.demos {
            *d.positions.last_mut().unwrap() = mean.clone();
            *d.velocities.last_mut().unwrap() = vec![0.0; self.n];
        }
        self.target = mean;
    }

    fn select(&self, ids: &[usize]) -> DemonstrationSet {
        DemonstrationSet {
            n: self.n,
            target: self.target.clone(),
            demos: ids.iter().map(|&i| self.demos[i].clone()).collect(),
            meta: self.meta.clone(),
        }
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn header(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).chain((1..=n).map(|i| format!("v{i}"))).collect()
}

pub fn load_demonstrations(path: impl AsRef<Path>, mode: LoadMode) -> Result<DemonstrationSet> {
    let dir = path.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Parse {
        file: manifest_path.display().to_string(),
        line: 0,
        msg: format!("cannot read manifest: {e}"),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: manifest_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.schema != DATA_SCHEMA {
        return Err(Error::Parse {
            file: manifest_path.display().to_string(),
            line: 1,
            msg: format!("unsupported schema '{}'", manifest.schema),
        });
    }
    if manifest.names.is_empty() {
        return Err(Error::Parse {
            file: manifest_path.display().to_string(),
            line: 1,
            msg: "manifest lists no demonstrations".into(),
        });
    }
    let n = manifest.n;
    let expected_header = header(n);
    let mut demos = Vec::with_capacity(manifest.names.len());
    for (id, name) in manifest.names.iter().enumerate() {
        let file = dir.join(name);
        let fname = file.display().to_string();
        let perr = |line: usize, msg: String| Error::Parse { file: fname.clone(), line, msg };
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(&file)
            .map_err(|e| perr(0, e.to_string()))?;
        let hdr = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
        let got: Vec<&str> = hdr.iter().collect();
        if got != expected_header.iter().map(String::as_str).collect::<Vec<_>>() {
            let line = hdr.position().map_or(1, |p| p.line() as usize);
            return Err(perr(line, format!("expected header {}", expected_header.join(","))));
        }
        let mut positions = Vec::new();
        let mut velocities = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                perr(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != 2 * n {
                return Err(perr(line, format!("expected {} fields, found {}", 2 * n, rec.len())));
            }
            let vals = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| perr(line, format!("'{s}': {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            positions.push(vals[..n].to_vec());
            velocities.push(vals[n..].to_vec());
        }
        if positions.len() != manifest.n_samples {
            return Err(perr(
                positions.len() + 1,
                format!("expected {} data rows, found {}", manifest.n_samples, positions.len()),
            ));
        }
        demos.push(Demonstration { id, positions, velocities });
    }
    let mut set = DemonstrationSet {
        n,
        target: manifest.target,
        demos,
        meta: DataMeta {
            name: manifest.name,
            units: manifest.units,
            source: manifest.source,
            dt: manifest.dt,
            normalized_velocities: manifest.normalized_velocities,
            generator: manifest.generator,
        },
    };
    set.check_shapes()?;
    let violations = set.assumption_violations();
    if !violations.is_empty() {
        match mode {
            LoadMode::Strict => return Err(Error::Validation(violations.join("; "))),
            LoadMode::Lenient => {
                for v in &violations {
                    log::warn!("{v}; re-pinning final samples to the mean endpoint");
                }
                set.repin_to_mean_endpoint();
            }
        }
    }
    Ok(set)
}

pub fn save_demonstrations(set: &DemonstrationSet, path: impl AsRef<Path>) -> Result<()> {
    let dir = path.as_ref();
    fs::create_dir_all(dir)?;
    let names: Vec<String> = (0..set.demos.len()).map(|k| format!("demo_{k:03}.csv")).collect();
    for (d, name) in set.demos.iter().zip(&names) {
        let mut out = header(set.n).join(",");
        out.push('\n');
        for (x, v) in d.positions.iter().zip(&d.velocities) {
            let row: Vec<String> = x.iter().chain(v).map(|f| format!("{f:?}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        fs::write(dir.join(name), out)?;
    }
    let manifest = Manifest {
        schema: DATA_SCHEMA.into(),
        version: crate::VERSION.into(),
        n: set.n,
        n_samples: set.n_samples(),
        target: set.target.clone(),
        units: set.meta.units.clone(),
        names,
        name: set.meta.name.clone(),
        source: set.meta.source.clone(),
        dt: set.meta.dt,
        normalized_velocities: set.meta.normalized_velocities,
        generator: set.meta.generator.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Shifts positions so the target is the origin and optionally rescales every
/// nonzero velocity to unit norm. Idempotent.
pub fn preprocess(set: &DemonstrationSet, normalize_velocities: bool) -> DemonstrationSet {
    let mut out = set.clone();
    let target = set.target.clone();
    for d in &mut out.demos {
        for x in &mut d.positions {
            for (xi, ti) in x.iter_mut().zip(&target) {
                *xi -= ti;
            }
        }
        if normalize_velocities && !set.meta.normalized_velocities {
            for v in &mut d.velocities {
                let nv = norm(v);
                if nv > 0.0 && nv != 1.0 {
                    for vi in v.iter_mut() {
                        *vi /= nv;
                    }
                }
            }
        }
    }
    out.target = vec![0.0; set.n];
    out.meta.normalized_velocities |= normalize_velocities;
    out
}

/// Sample spacing from metadata, or estimated as the median of
/// `‖x_{s+1} - x_s‖ / ‖ẋ_s‖`.
pub fn sample_spacing(set: &DemonstrationSet) -> Result<f64> {
    if let Some(dt) = set.meta.dt {
        return Ok(dt);
    }
    let mut ratios: Vec<f64> = set
        .demos
        .iter()
        .flat_map(|d| {
            d.positions.windows(2).zip(&d.velocities).filter_map(|(w, v)| {
                let sp = norm(v);
                (sp > 0.0).then(|| norm(&sub(&w[1], &w[0])) / sp)
            })
        })
        .filter(|r| r.is_finite() && *r > 0.0)
        .collect();
    if ratios.is_empty() {
        return Err(Error::Input("cannot determine sample spacing".into()));
    }
    ratios.sort_by(f64::total_cmp);
    Ok(ratios[ratios.len() / 2])
}

/// Adds independent uniform noise in `[-level, level]` to every position
/// coordinate. Velocities receive the finite difference of the noise over the
/// original sample spacing; the final sample stays pinned to the target with
/// zero velocity.
pub fn add_uniform_noise(set: &DemonstrationSet, level: f64, seed: u64) -> Result<DemonstrationSet> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::Input(format!("noise level must be non-negative, got {level}")));
    }
    if level == 0.0 {
        return Ok(set.clone());
    }
    let dt = sample_spacing(set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = set.clone();
    for d in &mut out.demos {
        let ns = d.len();
        let noise: Vec<Vec<f64>> = (0..ns)
            .map(|s| {
                (0..set.n)
                    .map(|_| if s + 1 == ns { 0.0 } else { rng.gen_range(-level..=level) })
                    .collect()
            })
            .collect();
        for (s, (pos, vel)) in d.positions.iter_mut().zip(&mut d.velocities).enumerate() {
            for i in 0..set.n {
                pos[i] += noise[s][i];
                if s + 1 < ns {
                    vel[i] += (noise[s + 1][i] - noise[s][i]) / dt;
                }
            }
        }
        *d.positions.last_mut().unwrap() = set.target.clone();
        *d.velocities.last_mut().unwrap() = vec![0.0; set.n];
    }
    Ok(out)
}

/// Random split at demonstration granularity. The test share is
/// `round(N_d · fraction)` clamped to `[1, N_d - 1]`.
pub fn split_train_test(
    set: &DemonstrationSet,
    test_fraction: f64,
    seed: u64,
) -> Result<(DemonstrationSet, DemonstrationSet)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Input(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let nd = set.n_demos();
    if nd < 2 {
        return Err(Error::Input("a train/test split needs at least two demonstrations".into()));
    }
    let n_test = ((nd as f64 * test_fraction).round() as usize).clamp(1, nd - 1);
    let mut idx: Vec<usize> = (0..nd).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test: Vec<usize> = idx[..n_test].to_vec();
    let mut train: Vec<usize> = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((set.select(&train), set.select(&test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// `ẋ = -x`
    Linear,
    /// Planar field whose integral curves follow a sine-shaped path into the origin.
    Sine,
    /// `ẋ = -x - 0.1 x∘3`
    Cubic,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SynthKind::Linear),
            "sine" => Ok(SynthKind::Sine),
            "cubic" => Ok(SynthKind::Cubic),
            other => Err(Error::Input(format!("unsupported synthetic kind '{other}'"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Linear => "linear",
            SynthKind::Sine => "sine",
            SynthKind::Cubic => "cubic",
        })
    }
}

const CUBIC_GAIN: f64 = 0.1;
const SINE_AMPLITUDE: f64 = 10.0;
const SINE_FREQ: f64 = std::f64::consts::PI / 20.0;
const SINE_RATE: f64 = 3.0;
const SINE_START: f64 = -40.0;

impl SynthKind {
    /// The generating vector field.
    pub fn field(&self, x: &[f64]) -> Vec<f64> {
        match self {
            SynthKind::Linear => x.iter().map(|v| -v).collect(),
            SynthKind::Cubic => x.iter().map(|v| -v - CUBIC_GAIN * v.powi(3)).collect(),
            SynthKind::Sine => {
                let (x1, x2) = (x[0], x[1]);
                let s = (SINE_FREQ * x1).sin();
                let c = (SINE_FREQ * x1).cos();
                vec![-x1, -SINE_RATE * (x2 - SINE_AMPLITUDE * s) - SINE_AMPLITUDE * SINE_FREQ * x1 * c]
            }
        }
    }

    fn description(&self) -> String {
        match self {
            SynthKind::Linear => "linear: dx/dt = -x".into(),
            SynthKind::Cubic => format!("cubic: dx/dt = -x - {CUBIC_GAIN} x^3 (element-wise)"),
            SynthKind::Sine => format!(
                "sine: y = (x1, x2 - A sin(w x1)), dy/dt = (-y1, -{SINE_RATE} y2), A = {SINE_AMPLITUDE}, w = pi/20"
            ),
        }
    }

    /// Closed-form state at time `t` from `x0`.
    fn flow(&self, x0: &[f64], t: f64) -> Vec<f64> {
        match self {
            SynthKind::Linear => x0.iter().map(|v| v * (-t).exp()).collect(),
            SynthKind::Cubic => x0
                .iter()
                .map(|&v| {
                    let e = (-t).exp();
                    v * e / (1.0 + CUBIC_GAIN * v * v * (1.0 - e * e)).sqrt()
                })
                .collect(),
            SynthKind::Sine => {
                let y1 = x0[0];
                let y2 = x0[1] - SINE_AMPLITUDE * (SINE_FREQ * y1).sin();
                let y1t = y1 * (-t).exp();
                let y2t = y2 * (-SINE_RATE * t).exp();
                vec![y1t, y2t + SINE_AMPLITUDE * (SINE_FREQ * y1t).sin()]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub demos: usize,
    pub samples: usize,
    pub seed: u64,
    /// Time span covered by each demonstration.
    pub horizon: f64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: usize, demos: usize, samples: usize, seed: u64) -> Self {
        Self { kind, n, demos, samples, seed, horizon: 10.0 }
    }
}

/// Samples the closed-form flow of the generating field from random starts.
/// Velocities are the field evaluated at the sampled states; the final sample
/// of every demonstration is pinned to the origin with zero velocity.
pub fn synth_generate(spec: &SynthSpec) -> Result<DemonstrationSet> {
    if spec.n == 0 || spec.demos == 0 || spec.samples < 2 {
        return Err(Error::Input("synthetic sets need n ≥ 1, at least one demo and two samples".into()));
    }
    if spec.kind == SynthKind::Sine && spec.n != 2 {
        return Err(Error::Input("the sine generator is planar (n = 2)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dt = spec.horizon / (spec.samples - 1) as f64;
    let mut demos = Vec::with_capacity(spec.demos);
    for id in 0..spec.demos {
        let x0: Vec<f64> = match spec.kind {
            SynthKind::Linear | SynthKind::Cubic => loop {
                let c: Vec<f64> = (0..spec.n).map(|_| rng.gen_range(-2.0..=2.0)).collect();
                if c.iter().any(|v: &f64| v.abs() >= 1.0) {
                    break c;
                }
            },
            SynthKind::Sine => {
                let x1 = SINE_START + rng.gen_range(-2.0..=2.0);
                let y2 = rng.gen_range(-3.0..=3.0);
                vec![x1, y2 + SINE_AMPLITUDE * (SINE_FREQ * x1).sin()]
            }
        };
        let mut positions = Vec::with_capacity(spec.samples);
        let mut velocities = Vec::with_capacity(spec.samples);
        for s in 0..spec.samples {
            if s + 1 == spec.samples {
                positions.push(vec![0.0; spec.n]);
                velocities.push(vec![0.0; spec.n]);
            } else {
                let x = spec.kind.flow(&x0, s as f64 * dt);
                velocities.push(spec.kind.field(&x));
                positions.push(x);
            }
        }
        demos.push(Demonstration { id, positions, velocities });
    }
    let set = DemonstrationSet {
        n: spec.n,
        target: vec![0.0; spec.n],
        demos,
        meta: DataMeta {
            name: format!("synthetic-{}", spec.kind),
            units: "unit".into(),
            source: format!("synth seed={}", spec.seed),
            dt: Some(dt),
            normalized_velocities: false,
            generator: Some(spec.kind.description()),
        },
    };
    set.validate()?;
    Ok(set)
}
