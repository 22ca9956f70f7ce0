//! `plyds`: learn, verify and simulate certified polynomial motion policies.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation, 3 learning or
//! numerical failure, 4 certification failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plyds_core::data::{load_demonstrations, save_demonstrations, synth_generate, LoadMode, SynthKind, SynthSpec};
use plyds_core::eval::{run_protocol, EvalConfig};
use plyds_core::learn::{learn_policy, LearnConfig, LearnedModel};
use plyds_core::rollout::{
    field_csv, perturbed_rollout, render_svg, rollouts_csv, streamline_field, write_trajectory_csv, Integrator,
    RolloutConfig,
};
use plyds_core::{BasisMode, Error, LpfMode};

#[derive(Parser)]
#[command(name = "plyds", version, about = "Certified polynomial dynamical-system policies from demonstrations")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a certified policy from a dataset directory.
    Learn(LearnArgs),
    /// Re-check a model's stability certificate; exit 0 iff certified.
    Verify(VerifyArgs),
    /// Simulate the policy from one start state.
    Rollout(RolloutArgs),
    /// Rollouts from a grid of starts over a planar box, as SVG and CSV.
    Streamlines(StreamlineArgs),
    /// Multi-seed train/test evaluation.
    Eval(EvalArgs),
    /// Write a synthetic dataset with a known generating field.
    Synth(SynthArgs),
}

#[derive(Args)]
struct LearnOptions {
    /// key=value file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Policy degree α.
    #[arg(long)]
    alpha: Option<usize>,
    /// LPF degree β.
    #[arg(long)]
    beta: Option<usize>,
    /// Decrease margin and stopping tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// ℓ1 weight λ1.
    #[arg(long)]
    l1: Option<f64>,
    /// Squared-Frobenius weight λ2.
    #[arg(long)]
    l2: Option<f64>,
    /// vector or scalar.
    #[arg(long)]
    lpf_mode: Option<LpfMode>,
    /// elementwise or full.
    #[arg(long)]
    basis: Option<BasisMode>,
    /// Fall back to the full basis if the element-wise basis admits no certificate.
    #[arg(long)]
    escalate_basis: bool,
    /// Overrides PLYDS_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_alternations: Option<usize>,
    #[arg(long)]
    sqp_steps: Option<usize>,
    /// Rescale nonzero velocities to unit norm before fitting.
    #[arg(long)]
    normalize_velocities: bool,
    /// Re-pin demonstrations that miss the common target instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    #[command(flatten)]
    opts: LearnOptions,
}

#[derive(Args)]
struct VerifyArgs {
    model: PathBuf,
}

#[derive(Args)]
struct RolloutArgs {
    model: PathBuf,
    /// Start state, comma or space separated.
    #[arg(long, allow_hyphen_values = true)]
    x0: String,
    #[arg(long, default_value_t = 1e-2)]
    dt: f64,
    #[arg(long, default_value_t = 100_000)]
    max_steps: usize,
    /// Convergence radius in world units (default 1e-2 of the workspace scale).
    #[arg(long)]
    radius: Option<f64>,
    /// euler or rk4.
    #[arg(long, default_value = "euler")]
    integrator: Integrator,
    /// Push `STEP:d1,d2,…` added before the update at STEP; repeatable.
    #[arg(long = "push", allow_hyphen_values = true)]
    pushes: Vec<String>,
    #[arg(long, default_value = "trajectory.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct StreamlineArgs {
    model: PathBuf,
    /// `x1min,x1max,x2min,x2max` (default: the model's audit box).
    #[arg(long, allow_hyphen_values = true)]
    bbox: Option<String>,
    /// Grid points per axis.
    #[arg(long, default_value_t = 15)]
    res: usize,
    #[arg(long, default_value_t = 1e-2)]
    dt: f64,
    #[arg(long, default_value_t = 100_000)]
    max_steps: usize,
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Rollouts as CSV; field samples go to `<stem>_field.csv` beside it.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Dataset directory drawn over the plot.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seeds: Option<usize>,
    /// Share of demonstrations held out.
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Uniform position noise added to training demonstrations.
    #[arg(long)]
    noise: Option<f64>,
    /// CSV report; a JSON summary is written next to it.
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    #[command(flatten)]
    opts: LearnOptions,
}

#[derive(Args)]
struct SynthArgs {
    /// linear, sine or cubic.
    #[arg(long)]
    kind: SynthKind,
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    demos: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Learning(String),
    Certification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Learning(_) => 3,
            Failure::Certification(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Learning(m) | Failure::Certification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Input(_) | Error::UnsupportedDimension(_) => Failure::Usage(msg),
            Error::Dimension { .. } | Error::Parse { .. } | Error::Validation(_) | Error::Io(_) | Error::Json(_) => {
                Failure::Data(msg)
            }
            Error::Infeasible { .. }
            | Error::NoCertificate { .. }
            | Error::Numerical(_)
            | Error::NonFinite { .. }
            | Error::Learning(_) => Failure::Learning(msg),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn write_file(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

/// Reads `key=value` lines; `#` starts a comment.
fn read_overlay(path: &Path) -> std::result::Result<BTreeMap<String, String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), k + 1)))?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, Failure> {
    value.parse().map_err(|_| usage(format!("config key '{key}': cannot parse '{value}'")))
}

/// Applies overlay keys to the learning and evaluation settings.
fn apply_overlay(map: &BTreeMap<String, String>, learn: &mut LearnConfig, eval: &mut EvalConfig) -> Outcome {
    for (key, v) in map {
        match key.as_str() {
            "alpha" => learn.alpha = parse_value(key, v)?,
            "beta" => learn.beta = parse_value(key, v)?,
            "tol" | "tolerance" => learn.tolerance = parse_value(key, v)?,
            "l1" | "lambda1" => learn.lambda1 = parse_value(key, v)?,
            "l2" | "lambda2" => learn.lambda2 = parse_value(key, v)?,
            "lpf_mode" => learn.lpf_mode = parse_value(key, v)?,
            "basis" | "basis_mode" => learn.basis_mode = parse_value(key, v)?,
            "escalate_basis" => learn.escalate_basis = parse_value(key, v)?,
            "seed" => learn.seed = parse_value(key, v)?,
            "max_alternations" => learn.max_alternations = parse_value(key, v)?,
            "sqp_steps" => learn.sqp_steps = parse_value(key, v)?,
            "eps_pd" => learn.eps_pd = parse_value(key, v)?,
            "gram_margin" => learn.gram_margin = parse_value(key, v)?,
            "lpf_margin" => learn.lpf_margin = parse_value(key, v)?,
            "audit_points" => learn.audit_points = parse_value(key, v)?,
            "normalize_velocities" => learn.normalize_velocities = parse_value(key, v)?,
            "admm_max_iters" => learn.admm.max_iters = parse_value(key, v)?,
            "seeds" => eval.seeds = parse_value(key, v)?,
            "test_fraction" => eval.test_fraction = parse_value(key, v)?,
            "noise" => eval.noise_level = parse_value(key, v)?,
            other => return Err(usage(format!("unknown config key '{other}'"))),
        }
    }
    Ok(())
}

/// Defaults, then the config file, then flags.
fn resolve(opts: &LearnOptions) -> std::result::Result<(LearnConfig, EvalConfig), Failure> {
    let mut learn = LearnConfig::default();
    let mut eval = EvalConfig::default();
    if let Some(path) = &opts.config {
        apply_overlay(&read_overlay(path)?, &mut learn, &mut eval)?;
    }
    macro_rules! flag {
        ($field:ident, $target:expr) => {
            if let Some(v) = opts.$field {
                $target = v;
            }
        };
    }
    flag!(alpha, learn.alpha);
    flag!(beta, learn.beta);
    flag!(tol, learn.tolerance);
    flag!(l1, learn.lambda1);
    flag!(l2, learn.lambda2);
    flag!(lpf_mode, learn.lpf_mode);
    flag!(basis, learn.basis_mode);
    flag!(seed, learn.seed);
    flag!(max_alternations, learn.max_alternations);
    flag!(sqp_steps, learn.sqp_steps);
    learn.normalize_velocities |= opts.normalize_velocities;
    learn.escalate_basis |= opts.escalate_basis;
    learn.validate().map_err(|e| usage(format!("{e}\nsee `plyds learn --help`")))?;
    Ok((learn, eval))
}

fn load_mode(lenient: bool) -> LoadMode {
    if lenient {
        LoadMode::Lenient
    } else {
        LoadMode::Strict
    }
}

fn learn(args: &LearnArgs) -> Outcome {
    let (cfg, _) = resolve(&args.opts)?;
    let data = load_demonstrations(&args.data, load_mode(args.opts.lenient))?;
    log::info!("loaded {} demonstrations × {} samples, n = {}", data.n_demos(), data.n_samples(), data.n);
    let model = learn_policy(&data, &cfg)?;
    model.save(&args.out)?;
    let m = &model.metrics;
    println!(
        "certified model written to {} (train MSE {:.4e}, {} alternations, {} SQP steps, {:.1} s)",
        args.out.display(),
        m.train_mse,
        m.alternations,
        m.sqp_accepted,
        m.seconds
    );
    if !model.certificate.is_certified() {
        return Err(Failure::Certification("learned model failed its certificate check".into()));
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> Outcome {
    let model = LearnedModel::load(&args.model)?;
    let r = model.verify()?;
    println!("verdict: {}", r.verdict);
    println!("matching residual: {:e}", r.matching_residual);
    println!("min eigenvalue of Q: {:?}", r.q_min_eig);
    println!("max eigenvalue of G: {:?}", r.g_max_eig);
    println!(
        "audit: positive {}/{}, decrease {}/{}",
        r.audit.positive_pass, r.audit.points, r.audit.decrease_pass, r.audit.points
    );
    if r.verdict.is_certified() {
        Ok(())
    } else {
        Err(Failure::Certification(format!("{}: {}", args.model.display(), r.verdict)))
    }
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, Failure> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| usage(format!("cannot parse '{t}' as a number"))))
        .collect()
}

fn parse_push(s: &str) -> std::result::Result<(usize, Vec<f64>), Failure> {
    let (step, offset) = s.split_once(':').ok_or_else(|| usage(format!("push '{s}' is not STEP:d1,d2,…")))?;
    let step = step.trim().parse().map_err(|_| usage(format!("push '{s}': bad step")))?;
    Ok((step, parse_floats(offset)?))
}

/// The audit box mapped out of the model frame: twice the demonstration box.
fn world_box(model: &LearnedModel) -> (Vec<f64>, Vec<f64>) {
    let frame = &model.policy.frame;
    (frame.to_world(&model.audit.lo), frame.to_world(&model.audit.hi))
}

/// Largest side of the demonstration box.
fn workspace_scale(model: &LearnedModel) -> f64 {
    let (lo, hi) = world_box(model);
    0.5 * lo.iter().zip(&hi).map(|(a, b)| b - a).fold(0.0, f64::max)
}

fn provenance(model_path: &Path, model: &LearnedModel, extra: &str) -> Result<String, Failure> {
    Ok(format!(
        "plyds {}\nmodel: {}\nlearn config: {}\n{extra}",
        plyds_core::VERSION,
        model_path.display(),
        serde_json::to_string(&model.config).map_err(Error::from)?
    ))
}

fn rollout(args: &RolloutArgs) -> Outcome {
    let model = LearnedModel::load(&args.model)?;
    let x0 = parse_floats(&args.x0)?;
    let pushes = args.pushes.iter().map(|p| parse_push(p)).collect::<std::result::Result<Vec<_>, _>>()?;
    let (lo, hi) = world_box(&model);
    // the audit box is already 2× the data box; the default rollout box is 4×
    let mut cfg = RolloutConfig::for_workspace(&lo, &hi);
    cfg.bounds = cfg.bounds.map(|(l, h)| plyds_core::rollout::expand_box(&l, &h, 0.5));
    cfg.dt = args.dt;
    cfg.max_steps = args.max_steps;
    cfg.integrator = args.integrator;
    cfg.convergence_radius = args.radius.unwrap_or(1e-2 * workspace_scale(&model));
    let t = perturbed_rollout(&model.policy, &x0, &cfg, &pushes)?;
    let extra = format!("rollout config: {}", serde_json::to_string(&cfg).map_err(Error::from)?);
    write_trajectory_csv(&t, &args.out, &provenance(&args.model, &model, &extra)?)?;
    println!("{} after {} steps; final state {:?}", t.status, t.steps(), t.last());
    Ok(())
}

fn streamlines(args: &StreamlineArgs) -> Outcome {
    let model = LearnedModel::load(&args.model)?;
    if model.policy.n != 2 {
        return Err(usage(format!("streamlines need a planar model, this one has n = {}", model.policy.n)));
    }
    if args.svg.is_none() && args.csv.is_none() {
        return Err(usage("nothing to write: pass --svg and/or --csv"));
    }
    let (lo, hi) = match &args.bbox {
        Some(b) => {
            let v = parse_floats(b)?;
            if v.len() != 4 || v[0] >= v[1] || v[2] >= v[3] {
                return Err(usage("--bbox expects x1min,x1max,x2min,x2max with min < max"));
            }
            (vec![v[0], v[2]], vec![v[1], v[3]])
        }
        None => world_box(&model),
    };
    let overlay = args.overlay.as_ref().map(|d| load_demonstrations(d, LoadMode::Lenient)).transpose()?;
    let mut cfg = RolloutConfig::for_workspace(&lo, &hi);
    cfg.dt = args.dt;
    cfg.max_steps = args.max_steps;
    cfg.convergence_radius = 1e-2 * workspace_scale(&model);
    let s = streamline_field(&model.policy, &lo, &hi, args.res, &cfg)?;
    let extra = format!(
        "streamlines: bbox {lo:?} to {hi:?}, resolution {}, rollout config {}",
        args.res,
        serde_json::to_string(&cfg).map_err(Error::from)?
    );
    let prov = provenance(&args.model, &model, &extra)?;
    if let Some(path) = &args.svg {
        write_file(path, &render_svg(&s, overlay.as_ref(), &prov))?;
    }
    if let Some(path) = &args.csv {
        write_file(path, &rollouts_csv(&s, &prov))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("streamlines");
        write_file(&path.with_file_name(format!("{stem}_field.csv")), &field_csv(&s, &prov))?;
    }
    println!(
        "{} rollouts, {:.0}% converged",
        s.trajectories.len(),
        100.0 * s.converged_fraction()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Outcome {
    let (learn, mut cfg) = resolve(&args.opts)?;
    cfg.learn = learn;
    if let Some(k) = args.seeds {
        cfg.seeds = k;
    }
    if let Some(f) = args.test_fraction {
        cfg.test_fraction = f;
    }
    if let Some(l) = args.noise {
        cfg.noise_level = l;
    }
    let data = load_demonstrations(&args.data, load_mode(args.opts.lenient))?;
    let report = run_protocol(&data, &cfg, &args.data.display().to_string())?;
    report.write(&args.out)?;
    let s = report.summary();
    println!(
        "{} seeds: test MSE {:.4e} ± {:.4e}, certified {}/{}, {:.1} s per seed{}",
        s.seeds,
        s.mean_mse,
        s.std_mse,
        s.certified,
        s.seeds,
        s.mean_seconds,
        if s.train_test_overlap { " (single demonstration: train and test overlap)" } else { "" }
    );
    for r in report.runs.iter().filter(|r| r.error.is_some()) {
        eprintln!("seed {}: {}", r.seed, r.error.as_deref().unwrap_or_default());
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> Outcome {
    let seed = args.seed.unwrap_or_else(plyds_core::learn::default_seed);
    let spec = SynthSpec::new(args.kind, args.n, args.demos, args.samples, seed);
    let data = synth_generate(&spec)?;
    save_demonstrations(&data, &args.out)?;
    println!("{} × {} samples of {} motion written to {}", args.demos, args.samples, args.kind, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Learn(a) => learn(a),
        Command::Verify(a) => verify(a),
        Command::Rollout(a) => rollout(a),
        Command::Streamlines(a) => streamlines(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
