//! Evaluation protocol: held-out MSE over seeds, degree and noise sweeps, and
//! the vector-versus-scalar LPF ablation.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{add_uniform_noise, preprocess, split_train_test, DemonstrationSet};
use crate::error::{check_dim, Error, Result};
use crate::learn::{learn_policy, LearnConfig};
use crate::lyapunov::LpfMode;
use crate::model::PolicyModel;

pub const EVAL_SCHEMA: &str = "plyds-eval/1";

/// `(1/2N) Σ ‖f̂(x) - ẋ‖²` over every test sample, in world units.
pub fn test_mse(m: &PolicyModel, test: &DemonstrationSet) -> Result<f64> {
    check_dim(m.n, test.n)?;
    if test.n_total() == 0 {
        return Err(Error::Input("test set has no samples".into()));
    }
    let mut sum = 0.0;
    for (x, v) in test.samples() {
        let f = m.field(x)?;
        sum += f.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(sum / (2.0 * test.n_total() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub learn: LearnConfig,
    pub seeds: usize,
    /// Share of demonstrations held out for testing.
    pub test_fraction: f64,
    /// Uniform position noise added to the training split.
    pub noise_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { learn: LearnConfig::default(), seeds: 20, test_fraction: 2.0 / 7.0, noise_level: 0.0 }
    }
}

/// Seed of run `index`: the base seed xor the index.
pub fn run_seed(base: u64, index: usize) -> u64 {
    base ^ index as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub index: usize,
    pub seed: u64,
    pub test_mse: Option<f64>,
    pub train_mse: Option<f64>,
    pub certified: bool,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub version: String,
    pub dataset: String,
    pub config: EvalConfig,
    /// Set when the dataset has a single demonstration, which is then used for
    /// both training and testing.
    pub train_test_overlap: bool,
    pub runs: Vec<SeedRun>,
}

/// Aggregates recomputed from the per-seed rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub seeds: usize,
    /// Runs that produced a model.
    pub completed: usize,
    pub certified: usize,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub median_mse: f64,
    pub mean_seconds: f64,
    pub train_test_overlap: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

impl EvalReport {
    pub fn mses(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.test_mse).collect()
    }

    pub fn certified_count(&self) -> usize {
        self.runs.iter().filter(|r| r.certified).count()
    }

    pub fn certification_rate(&self) -> f64 {
        self.certified_count() as f64 / self.runs.len().max(1) as f64
    }

    /// Mean and population standard deviation of the test MSE over completed runs.
    pub fn mean_std(&self) -> (f64, f64) {
        let v = self.mses();
        if v.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    }

    pub fn median_mse(&self) -> f64 {
        median(self.mses())
    }

    pub fn summary(&self) -> EvalSummary {
        let (mean_mse, std_mse) = self.mean_std();
        EvalSummary {
            seeds: self.runs.len(),
            completed: self.mses().len(),
            certified: self.certified_count(),
            mean_mse,
            std_mse,
            median_mse: self.median_mse(),
            mean_seconds: self.runs.iter().map(|r| r.seconds).sum::<f64>() / self.runs.len().max(1) as f64,
            train_test_overlap: self.train_test_overlap,
        }
    }

    /// One row per seed, preceded by `#` lines with the schema, version and
    /// resolved config.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!(
            "# schema: {}\n# version: {}\n# dataset: {}\n# config: {}\n",
            self.schema,
            self.version,
            self.dataset,
            serde_json::to_string(&self.config)?
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "seed", "test_mse", "train_mse", "certified", "seconds", "error"])
            .map_err(|e| Error::Input(e.to_string()))?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.runs {
            w.write_record([
                r.index.to_string(),
                r.seed.to_string(),
                opt(r.test_mse),
                opt(r.train_mse),
                r.certified.to_string(),
                r.seconds.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| Error::Input(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        out.push_str(&String::from_utf8_lossy(&body));
        Ok(out)
    }

    /// JSON with the full report and its derived summary.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            report: &'a EvalReport,
            summary: EvalSummary,
        }
        Ok(serde_json::to_string_pretty(&Doc { report: self, summary: self.summary() })?)
    }

    /// Writes `path` as CSV and the JSON summary next to it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_csv()?)?;
        fs::write(path.with_extension("json"), self.to_json()?)?;
        Ok(())
    }
}

fn run_one(data: &DemonstrationSet, cfg: &EvalConfig, index: usize) -> SeedRun {
    let seed = run_seed(cfg.learn.seed, index);
    let start = Instant::now();
    let mut run = SeedRun { index, seed, test_mse: None, train_mse: None, certified: false, seconds: 0.0, error: None };
    let outcome = (|| -> Result<(f64, f64, bool)> {
        let (train, test) = if data.n_demos() == 1 {
            (data.clone(), data.clone())
        } else {
            split_train_test(data, cfg.test_fraction, seed)?
        };
        let train = add_uniform_noise(&train, cfg.noise_level, seed)?;
        let learn = LearnConfig { seed, ..cfg.learn.clone() };
        let model = learn_policy(&train, &learn)?;
        let mut test = test;
        if learn.normalize_velocities {
            let normalized = preprocess(&test, true);
            for (d, nd) in test.demos.iter_mut().zip(normalized.demos) {
                d.velocities = nd.velocities;
            }
        }
        let certified = model.verify()?.verdict.is_certified();
        Ok((test_mse(&model.policy, &test)?, model.metrics.train_mse, certified))
    })();
    match outcome {
        Ok((mse, train_mse, certified)) => {
            run.test_mse = Some(mse);
            run.train_mse = Some(train_mse);
            run.certified = certified;
        }
        Err(e) => run.error = Some(e.to_string()),
    }
    run.seconds = start.elapsed().as_secs_f64();
    run
}

/// Split, learn, certify and score once per seed. Seeds run in parallel; the
/// report lists them in seed order and records failures instead of dropping them.
pub fn run_protocol(data: &DemonstrationSet, cfg: &EvalConfig, dataset: &str) -> Result<EvalReport> {
    data.validate()?;
    cfg.learn.validate()?;
    if cfg.seeds == 0 {
        return Err(Error::Input("evaluation needs at least one seed".into()));
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::Input(format!("test fraction must be in (0, 1), got {}", cfg.test_fraction)));
    }
    let runs = (0..cfg.seeds).into_par_iter().map(|i| run_one(data, cfg, i)).collect();
    Ok(EvalReport {
        schema: EVAL_SCHEMA.into(),
        version: crate::VERSION.into(),
        dataset: dataset.into(),
        config: cfg.clone(),
        train_test_overlap: data.n_demos() == 1,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: usize,
    pub beta: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    /// Places where higher degree did not help. Informational only, since
    /// overfitting can legitimately cause it.
    pub advisories: Vec<String>,
}

impl SweepReport {
    pub fn cell(&self, alpha: usize, beta: usize) -> Option<&EvalReport> {
        self.cells.iter().find(|c| c.alpha == alpha && c.beta == beta).map(|c| &c.report)
    }
}

pub fn degree_sweep(
    data: &DemonstrationSet,
    alphas: &[usize],
    betas: &[usize],
    cfg: &EvalConfig,
    dataset: &str,
) -> Result<SweepReport> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::Input("degree sweep needs at least one α and one β".into()));
    }
    let mut cells = Vec::new();
    for &beta in betas {
        for &alpha in alphas {
            let c = EvalConfig { learn: LearnConfig { alpha, beta, ..cfg.learn.clone() }, ..cfg.clone() };
            cells.push(SweepCell { alpha, beta, report: run_protocol(data, &c, dataset)? });
        }
    }
    let mut advisories = Vec::new();
    for &beta in betas {
        let row: Vec<&SweepCell> = cells.iter().filter(|c| c.beta == beta).collect();
        for w in row.windows(2) {
            let (a, b) = (w[0].report.median_mse(), w[1].report.median_mse());
            if b > a {
                advisories.push(format!(
                    "β={beta}: median MSE rose from {a:e} at α={} to {b:e} at α={}",
                    w[0].alpha, w[1].alpha
                ));
            }
            let (ra, rb) = (w[0].report.certification_rate(), w[1].report.certification_rate());
            if rb < ra {
                advisories.push(format!(
                    "β={beta}: certification rate fell from {ra} at α={} to {rb} at α={}",
                    w[0].alpha, w[1].alpha
                ));
            }
        }
    }
    Ok(SweepReport { cells, advisories })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub level: f64,
    pub report: EvalReport,
}

/// The protocol at each noise level; noise goes on the training split only.
pub fn noise_sweep(data: &DemonstrationSet, levels: &[f64], cfg: &EvalConfig, dataset: &str) -> Result<Vec<NoiseRow>> {
    levels
        .iter()
        .map(|&level| {
            let c = EvalConfig { noise_level: level, ..cfg.clone() };
            Ok(NoiseRow { level, report: run_protocol(data, &c, dataset)? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub vector: EvalReport,
    pub scalar: EvalReport,
}

/// Same protocol with a vector LPF and with a single scalar LPF.
pub fn lpf_ablation(data: &DemonstrationSet, cfg: &EvalConfig, dataset: &str) -> Result<Ablation> {
    let with = |mode| EvalConfig { learn: LearnConfig { lpf_mode: mode, ..cfg.learn.clone() }, ..cfg.clone() };
    Ok(Ablation {
        vector: run_protocol(data, &with(LpfMode::Vector), dataset)?,
        scalar: run_protocol(data, &with(LpfMode::Scalar), dataset)?,
    })
}
