//! Monte-Carlo harness: seeded trials of the extraction and separation
//! experiments, aggregated into histogram, trial, trajectory and summary
//! files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checks::{self, CheckReport, Mutation, Scale};
use crate::extract::{run_extraction, Algorithm, ExtractOptions, HessianMode, StoppingRule};
use crate::metrics::{
    classify_outcome, histogram_rows, isr, mean_trajectory, median, sir, Classification, Histogram, HistogramRow,
    TrajectoryPoint, TrajectoryRow, TrialOutcome, SUCCESS_DB,
};
use crate::model::{CovarianceSet, Dataset};
use crate::scalar::{CMat, CVec};
use crate::score::{score_by_name, ScoreFunction, SCORE_NAMES};
use crate::separate::{run_separation, Variant};
use crate::simgen::{
    complex_gaussian_matrix, generate_separation_dataset,
    near_ideal_init, random_mixing, trial_rng, TrialRng, COND_CAP,
};
use crate::{IveError, Result};

pub const AUTO_SCORE: &str = "auto";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Extraction,
    CsvExtraction,
    Separation,
    Selftest,
}

impl ExperimentKind {
    pub fn id(self) -> &'static str {
        match self {
            ExperimentKind::Extraction => "extraction",
            ExperimentKind::CsvExtraction => "csv_extraction",
            ExperimentKind::Separation => "separation",
            ExperimentKind::Selftest => "selftest",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ExperimentKind {
    type Err = IveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extraction" => Ok(ExperimentKind::Extraction),
            "csv_extraction" => Ok(ExperimentKind::CsvExtraction),
            "separation" => Ok(ExperimentKind::Separation),
            "selftest" => Ok(ExperimentKind::Selftest),
            other => Err(IveError::Config(format!("unknown experiment '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// True separating vector plus a perturbation of fixed norm.
    NearIdeal,
    /// Complex Gaussian separating vectors (extraction) or the inverse of a
    /// random mixing matrix (separation).
    Random,
}

impl FromStr for InitKind {
    type Err = IveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "near_ideal" => Ok(InitKind::NearIdeal),
            "random" => Ok(InitKind::Random),
            other => Err(IveError::Config(format!("unknown init '{other}'"))),
        }
    }
}

/// A method as run by the harness. `joint = false` runs the one-unit
/// algorithm on every mixture separately (the ICE variants).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Extraction { algorithm: Algorithm, joint: bool },
    Separation(Variant),
}

impl Method {
    pub fn id(self) -> &'static str {
        match self {
            Method::Extraction { algorithm, joint: true } => algorithm.id(),
            Method::Extraction { algorithm, joint: false } => match algorithm {
                Algorithm::QuickIve1 => "quickice1",
                Algorithm::QuickIve2 => "quickice2",
                Algorithm::Gradient => "gradient_ice",
            },
            Method::Separation(v) => v.id(),
        }
    }
}

impl FromStr for Method {
    type Err = IveError;

    fn from_str(s: &str) -> Result<Self> {
        let single = |algorithm| Method::Extraction { algorithm, joint: false };
        match s {
            "quickice1" => Ok(single(Algorithm::QuickIve1)),
            "quickice2" => Ok(single(Algorithm::QuickIve2)),
            "gradient_ice" => Ok(single(Algorithm::Gradient)),
            "quickiva1" | "quickiva2" => Ok(Method::Separation(s.parse()?)),
            other => Ok(Method::Extraction {
                algorithm: other.parse()?,
                joint: true,
            }),
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub algorithms: Vec<String>,
    /// Score name, or `auto`: `norm` for the gradient methods and
    /// `rational` for the Newton-type methods.
    pub score: String,
    pub k: usize,
    pub d: usize,
    pub t: usize,
    pub n_b: usize,
    /// Sources obeying the piecewise-determined model (csv_extraction).
    pub n_csv: usize,
    /// Shape of the exp-power law of the sources.
    pub alpha: f64,
    pub trials: usize,
    pub seed: u64,
    pub init: InitKind,
    pub perturbation: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Iteration budget of separation trials.
    pub iterations: usize,
    pub hessian: String,
    pub mu: f64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let base = Self {
            experiment: kind,
            algorithms: ["quickive1", "quickive2", "gradient", "quickice1", "quickice2", "gradient_ice"]
                .map(String::from)
                .to_vec(),
            score: AUTO_SCORE.into(),
            k: 3,
            d: 6,
            t: 1,
            n_b: 1000,
            n_csv: 3,
            alpha: crate::simgen::LAPLACE_ALPHA,
            trials: 1000,
            seed: 0,
            init: InitKind::NearIdeal,
            perturbation: 0.1,
            tol: 1e-6,
            max_iter: 1000,
            iterations: 50,
            hessian: "exact".into(),
            mu: 0.2,
            workers: 0,
            out: PathBuf::from("out"),
        };
        match kind {
            ExperimentKind::Extraction | ExperimentKind::Selftest => base,
            ExperimentKind::CsvExtraction => Self {
                algorithms: ["quickive2", "gradient", "quickice2", "gradient_ice"].map(String::from).to_vec(),
                t: 3,
                ..base
            },
            ExperimentKind::Separation => Self {
                algorithms: ["quickiva1", "quickiva2"].map(String::from).to_vec(),
                d: 5,
                n_b: 5000,
                alpha: 0.4,
                trials: 100,
                init: InitKind::Random,
                ..base
            },
        }
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.algorithms.iter().map(|s| s.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("d", self.d),
            ("t", self.t),
            ("n_b", self.n_b),
            ("trials", self.trials),
            ("max_iter", self.max_iter),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(IveError::Config(format!("{name} must be positive")));
        }
        if self.algorithms.is_empty() {
            return Err(IveError::Config("no algorithms selected".into()));
        }
        if self.score != AUTO_SCORE && !SCORE_NAMES.contains(&self.score.as_str()) {
            return Err(IveError::Config(format!(
                "unknown score '{}' (expected one of {SCORE_NAMES:?})",
                self.score
            )));
        }
        if !(self.tol > 0.0) || !(self.mu >= 0.0) || !(self.alpha > 0.0) || !(self.perturbation >= 0.0) {
            return Err(IveError::Config("tol and alpha must be positive, mu and perturbation non-negative".into()));
        }
        self.hessian.parse::<HessianMode>()?;
        let methods = self.methods()?;
        match self.experiment {
            ExperimentKind::Separation => {
                if methods.iter().any(|m| !matches!(m, Method::Separation(_))) {
                    return Err(IveError::Config("separation runs quickiva1 / quickiva2 only".into()));
                }
                if self.t != 1 {
                    return Err(IveError::Config("separation needs t = 1".into()));
                }
            }
            ExperimentKind::Extraction | ExperimentKind::CsvExtraction => {
                if methods.iter().any(|m| matches!(m, Method::Separation(_))) {
                    return Err(IveError::Config("separation variants need the separation experiment".into()));
                }
                if self.d < 2 && self.init == InitKind::NearIdeal && self.k == 0 {
                    return Err(IveError::Config("invalid dimensions".into()));
                }
                if self.experiment == ExperimentKind::CsvExtraction && (self.n_csv == 0 || self.n_csv > self.d) {
                    return Err(IveError::Config("need 1 <= n_csv <= d".into()));
                }
            }
            ExperimentKind::Selftest => {}
        }
        Ok(())
    }

    fn options(&self) -> ExtractOptions<f64> {
        ExtractOptions {
            hessian: self.hessian.parse().unwrap_or(HessianMode::Exact),
            mu: self.mu,
            ..ExtractOptions::default()
        }
    }

    fn stopping(&self) -> StoppingRule<f64> {
        StoppingRule {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }

    /// Score used by `method`.
    pub fn score_name(&self, method: Method) -> &str {
        match (self.score.as_str(), method) {
            (
                AUTO_SCORE,
                Method::Extraction {
                    algorithm: Algorithm::Gradient,
                    ..
                },
            ) => "norm",
            (AUTO_SCORE, _) => "rational",
            (name, _) => name,
        }
    }

    fn score_fn(&self, method: Method) -> Box<dyn ScoreFunction<f64>> {
        score_by_name(self.score_name(method)).expect("score validated")
    }
}

/// Partial configuration, as read from a JSON file or collected from flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigOverrides {
    pub experiment: Option<ExperimentKind>,
    pub algorithms: Option<Vec<String>>,
    pub score: Option<String>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub t: Option<usize>,
    pub n_b: Option<usize>,
    pub n_csv: Option<usize>,
    pub alpha: Option<f64>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub init: Option<InitKind>,
    pub perturbation: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub iterations: Option<usize>,
    pub hessian: Option<String>,
    pub mu: Option<f64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ConfigOverrides {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| IveError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| IveError::Config(format!("{}: {e}", path.display())))
    }

    fn apply(self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(algorithms, score, k, d, t, n_b, n_csv, alpha, trials, seed, init, perturbation, tol, max_iter, iterations, hessian, mu, workers, out);
    }
}

/// Defaults of the selected experiment, then the file, then the flags.
pub fn resolve_config(file: Option<ConfigOverrides>, flags: ConfigOverrides) -> Result<ExperimentConfig> {
    let file = file.unwrap_or_default();
    let kind = flags.experiment.or(file.experiment).unwrap_or(ExperimentKind::Extraction);
    let mut cfg = ExperimentConfig::defaults(kind);
    file.apply(&mut cfg);
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// One row of `trials.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub k: usize,
    pub algorithm: String,
    pub sir_db: Option<f64>,
    /// Per-source ISR values joined by `;`.
    pub isr_db: String,
    pub iterations: usize,
    pub wall_ms: f64,
    pub classification: Option<Classification>,
    pub error: Option<String>,
}

impl From<&TrialOutcome> for TrialRow {
    fn from(o: &TrialOutcome) -> Self {
        Self {
            trial: o.trial,
            k: o.k,
            algorithm: o.algorithm.clone(),
            sir_db: o.sir_db,
            isr_db: o.isr_db.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";"),
            iterations: o.iterations,
            wall_ms: o.wall_ms,
            classification: o.classification,
            error: o.error.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlgorithmSummary {
    pub algorithm: String,
    pub outcomes: usize,
    pub errors: usize,
    pub success: usize,
    pub other_source: usize,
    pub failure: usize,
    /// Successes over completed runs; equals the histogram mass above 15 dB.
    pub success_fraction: Option<f64>,
    pub median_iterations: Option<f64>,
    pub mean_wall_ms_per_iteration: Option<f64>,
    /// Separation only: mean ISR over sources, mixtures and trials after the
    /// last iteration.
    pub final_isr_db_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub trials: usize,
    pub algorithms: Vec<AlgorithmSummary>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// Ordered by trial, then method, then mixture.
    pub outcomes: Vec<TrialOutcome>,
    pub histograms: Vec<(String, Histogram)>,
    pub iteration_histograms: Vec<(String, Histogram)>,
    /// Separation only: per-trial ISR trajectories per method.
    pub trajectories: Vec<(String, Vec<Vec<TrajectoryPoint>>)>,
    pub summary: Summary,
    pub selftest: Option<CheckReport>,
}

impl ExperimentResult {
    pub fn outcomes_for<'a>(&'a self, algorithm: &'a str) -> impl Iterator<Item = &'a TrialOutcome> + 'a {
        self.outcomes.iter().filter(move |o| o.algorithm == algorithm)
    }

    pub fn summary_for(&self, algorithm: &str) -> Option<&AlgorithmSummary> {
        self.summary.algorithms.iter().find(|s| s.algorithm == algorithm)
    }

    pub fn mean_trajectory(&self, algorithm: &str) -> Vec<TrajectoryRow> {
        self.trajectories
            .iter()
            .find(|(a, _)| a == algorithm)
            .map(|(a, t)| mean_trajectory(t, a))
            .unwrap_or_default()
    }
}

fn error_outcome(trial: usize, k: usize, method: Method, err: &IveError) -> TrialOutcome {
    TrialOutcome {
        trial,
        k,
        algorithm: method.id().to_string(),
        sir_db: None,
        isr_db: Vec::new(),
        iterations: 0,
        wall_ms: 0.0,
        classification: None,
        error: Some(err.to_string()),
    }
}

/// Signal of the SOI in mixture `k`, blocks concatenated.
fn true_soi(data: &Dataset<f64>, k: usize) -> Vec<Complex<f64>> {
    (0..data.t_count())
        .flat_map(|t| {
            data.true_sources(k, t)
                .expect("generated data has ground truth")
                .row(0)
                .iter()
                .copied()
                .collect::<Vec<_>>()
        })
        .collect()
}

fn extraction_data(cfg: &ExperimentConfig, rng: &mut TrialRng) -> Result<Dataset<f64>> {
    match cfg.experiment {
        ExperimentKind::CsvExtraction => {
            crate::simgen::generate_csv_dataset_with(rng, cfg.k, cfg.d, cfg.t, cfg.n_b, cfg.n_csv, cfg.alpha)
        }
        _ if cfg.t > 1 => crate::simgen::generate_csv_dataset_with(rng, cfg.k, cfg.d, cfg.t, cfg.n_b, cfg.d, cfg.alpha),
        _ => crate::simgen::generate_iva_dataset_with(rng, cfg.k, cfg.d, cfg.n_b, cfg.alpha),
    }
}

fn extraction_trial(cfg: &ExperimentConfig, methods: &[Method], trial: usize) -> Vec<TrialOutcome> {
    let mut rng = trial_rng(cfg.seed, trial as u64);
    let prepared = (|| -> Result<_> {
        let data = extraction_data(cfg, &mut rng)?;
        let init: Vec<CVec<f64>> = match cfg.init {
            InitKind::NearIdeal => near_ideal_init(&mut rng, &data, cfg.perturbation)?,
            InitKind::Random => (0..cfg.k)
                .map(|_| complex_gaussian_matrix::<f64, _>(&mut rng, cfg.d, 1).column(0).into_owned())
                .collect(),
        };
        let with_inverse = cfg.options().hessian == HessianMode::Approx;
        let cov = CovarianceSet::from_dataset(&data, with_inverse)?;
        Ok((data, init, cov, with_inverse))
    })();
    let (data, init, cov, with_inverse) = match prepared {
        Ok(p) => p,
        Err(e) => {
            return methods
                .iter()
                .flat_map(|&m| (0..cfg.k).map(move |k| (m, k)))
                .map(|(m, k)| error_outcome(trial, k, m, &e))
                .collect();
        }
    };
    let opts = cfg.options();
    let stopping = cfg.stopping();
    let mut out = Vec::new();
    for &method in methods {
        let Method::Extraction { algorithm, joint } = method else {
            continue;
        };
        let score = cfg.score_fn(method);
        let outcome = |k: usize, run: Result<(Vec<Complex<f64>>, usize, f64)>| match run {
            Ok((y, iterations, wall_ms)) => {
                let sir_db = sir(&y, &true_soi(&data, k));
                TrialOutcome {
                    trial,
                    k,
                    algorithm: method.id().to_string(),
                    sir_db: Some(sir_db),
                    isr_db: Vec::new(),
                    iterations,
                    wall_ms,
                    classification: Some(classify_outcome(sir_db)),
                    error: None,
                }
            }
            Err(e) => error_outcome(trial, k, method, &e),
        };
        if joint {
            match run_extraction(algorithm, &data, &cov, score.as_ref(), &init, &stopping, &opts) {
                Ok(run) => {
                    for k in 0..cfg.k {
                        let y = run.state.extracted(&data, k);
                        out.push(outcome(k, Ok((y, run.iterations, run.wall_ms))));
                    }
                }
                Err(e) => out.extend((0..cfg.k).map(|k| error_outcome(trial, k, method, &e))),
            }
        } else {
            for k in 0..cfg.k {
                let run = (|| -> Result<_> {
                    let single = data.single(k);
                    let cov_k = CovarianceSet::from_dataset(&single, with_inverse)?;
                    let run = run_extraction(algorithm, &single, &cov_k, score.as_ref(), &init[k..k + 1], &stopping, &opts)?;
                    Ok((run.state.extracted(&single, 0), run.iterations, run.wall_ms))
                })();
                out.push(outcome(k, run));
            }
        }
    }
    out
}

/// Mean of the per-source ISR values over all mixtures.
fn mean_isr(demixing: &[CMat<f64>], data: &Dataset<f64>) -> (f64, Vec<Vec<f64>>) {
    let per_k: Vec<Vec<f64>> = demixing
        .iter()
        .enumerate()
        .map(|(k, w)| isr(w, data.true_mixing(k, 0).expect("generated data has ground truth")))
        .collect();
    let all: Vec<f64> = per_k.iter().flatten().copied().collect();
    (all.iter().sum::<f64>() / all.len() as f64, per_k)
}

type SeparationTrial = (Vec<TrialOutcome>, Vec<Vec<TrajectoryPoint>>);

fn separation_trial(cfg: &ExperimentConfig, methods: &[Method], trial: usize) -> SeparationTrial {
    let mut rng = trial_rng(cfg.seed, trial as u64);
    let prepared = (|| -> Result<_> {
        let data: Dataset<f64> = generate_separation_dataset(&mut rng, cfg.k, cfg.d, cfg.n_b, cfg.alpha)?;
        let init = match cfg.init {
            InitKind::Random => (0..cfg.k)
                .map(|_| {
                    let a: CMat<f64> = random_mixing(&mut rng, cfg.d, COND_CAP)?;
                    a.try_inverse().ok_or(IveError::RankDeficient(0.0))
                })
                .collect::<Result<Vec<_>>>()?,
            InitKind::NearIdeal => (0..cfg.k)
                .map(|k| {
                    let a = data.true_mixing(k, 0).expect("generated data has ground truth");
                    let w = a.clone().try_inverse().ok_or(IveError::RankDeficient(0.0))?;
                    let noise: CMat<f64> = complex_gaussian_matrix(&mut rng, cfg.d, cfg.d);
                    let scale = cfg.perturbation / noise.norm() * w.norm();
                    Ok(w + noise * Complex::new(scale, 0.0))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok((data, init))
    })();
    let (data, init) = match prepared {
        Ok(p) => p,
        Err(e) => {
            let outcomes = methods
                .iter()
                .flat_map(|&m| (0..cfg.k).map(move |k| (m, k)))
                .map(|(m, k)| error_outcome(trial, k, m, &e))
                .collect();
            return (outcomes, vec![Vec::new(); methods.len()]);
        }
    };
    let opts = cfg.options();
    let stopping = cfg.stopping();
    let mut outcomes = Vec::new();
    let mut trajectories = Vec::new();
    for &method in methods {
        let Method::Separation(variant) = method else {
            continue;
        };
        let score = cfg.score_fn(method);
        match run_separation(variant, &data, score.as_ref(), &init, cfg.iterations, Some(&stopping), &opts) {
            Ok(run) => {
                let trajectory: Vec<TrajectoryPoint> = run
                    .history
                    .iter()
                    .map(|snap| TrajectoryPoint {
                        iteration: snap.iteration,
                        wall_ms: snap.elapsed_ms,
                        isr_db: mean_isr(&snap.demixing, &data).0,
                    })
                    .collect();
                let last = run.history.last().expect("history holds the initial point");
                let (_, per_k) = mean_isr(&last.demixing, &data);
                for (k, isr_db) in per_k.into_iter().enumerate() {
                    outcomes.push(TrialOutcome {
                        trial,
                        k,
                        algorithm: method.id().to_string(),
                        sir_db: None,
                        isr_db,
                        iterations: run.iterations(),
                        wall_ms: last.elapsed_ms,
                        classification: None,
                        error: None,
                    });
                }
                trajectories.push(trajectory);
            }
            Err(e) => {
                outcomes.extend((0..cfg.k).map(|k| error_outcome(trial, k, method, &e)));
                trajectories.push(Vec::new());
            }
        }
    }
    (outcomes, trajectories)
}

fn with_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let threads = if workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| IveError::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Iteration-count bins of width 10 over `[0, 1000]`.
fn iteration_histogram(values: impl IntoIterator<Item = f64>) -> Histogram {
    Histogram::from_values(values, 0.0, 1000.0, 10.0)
}

fn summarize(algorithm: &str, outcomes: &[&TrialOutcome], trajectories: Option<&[Vec<TrajectoryPoint>]>) -> AlgorithmSummary {
    let done: Vec<&&TrialOutcome> = outcomes.iter().filter(|o| o.error.is_none()).collect();
    let count = |c: Classification| done.iter().filter(|o| o.classification == Some(c)).count();
    let success = count(Classification::Success);
    let classified = done.iter().filter(|o| o.classification.is_some()).count();
    let mut iterations: Vec<f64> = done.iter().map(|o| o.iterations as f64).collect();
    let total_iterations: usize = done.iter().map(|o| o.iterations).sum();
    let total_ms: f64 = done.iter().map(|o| o.wall_ms).sum();
    let final_isr = trajectories.and_then(|t| {
        let finals: Vec<f64> = t.iter().filter_map(|p| p.last().map(|x| x.isr_db)).collect();
        (!finals.is_empty()).then(|| finals.iter().sum::<f64>() / finals.len() as f64)
    });
    AlgorithmSummary {
        algorithm: algorithm.to_string(),
        outcomes: outcomes.len(),
        errors: outcomes.len() - done.len(),
        success,
        other_source: count(Classification::OtherSource),
        failure: count(Classification::Failure),
        success_fraction: (classified > 0).then(|| success as f64 / classified as f64),
        median_iterations: median(&mut iterations),
        mean_wall_ms_per_iteration: (total_iterations > 0).then(|| total_ms / total_iterations as f64),
        final_isr_db_mean: final_isr,
    }
}

/// Runs every trial of the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    if cfg.experiment == ExperimentKind::Selftest {
        let report = checks::run_all(cfg.seed, Mutation::None, Scale::Full);
        return Ok(ExperimentResult {
            config: cfg.clone(),
            outcomes: Vec::new(),
            histograms: Vec::new(),
            iteration_histograms: Vec::new(),
            trajectories: Vec::new(),
            summary: Summary {
                experiment: cfg.experiment,
                seed: cfg.seed,
                trials: 0,
                algorithms: Vec::new(),
                config: cfg.clone(),
            },
            selftest: Some(report),
        });
    }
    let methods = cfg.methods()?;
    let separation = cfg.experiment == ExperimentKind::Separation;
    let per_trial: Vec<SeparationTrial> = with_pool(cfg.workers, || {
        (0..cfg.trials)
            .into_par_iter()
            .map(|trial| {
                if separation {
                    separation_trial(cfg, &methods, trial)
                } else {
                    (extraction_trial(cfg, &methods, trial), Vec::new())
                }
            })
            .collect()
    })?;

    let mut outcomes = Vec::new();
    let mut trajectories: Vec<(String, Vec<Vec<TrajectoryPoint>>)> =
        methods.iter().map(|m| (m.id().to_string(), Vec::new())).collect();
    for (trial_outcomes, trial_paths) in per_trial {
        outcomes.extend(trial_outcomes);
        for (slot, path) in trajectories.iter_mut().zip(trial_paths) {
            slot.1.push(path);
        }
    }
    if !separation {
        trajectories.clear();
    }

    let mut histograms = Vec::new();
    let mut iteration_histograms = Vec::new();
    let mut summaries = Vec::new();
    for method in &methods {
        let id = method.id();
        let mine: Vec<&TrialOutcome> = outcomes.iter().filter(|o| o.algorithm == id).collect();
        let done = || mine.iter().filter(|o| o.error.is_none());
        let values: Vec<f64> = if separation {
            done().flat_map(|o| o.isr_db.iter().copied()).collect()
        } else {
            done().filter_map(|o| o.sir_db).collect()
        };
        histograms.push((id.to_string(), Histogram::from_values(values, -51.0, 51.0, 2.0)));
        iteration_histograms.push((id.to_string(), iteration_histogram(done().map(|o| o.iterations as f64))));
        let paths = trajectories.iter().find(|(a, _)| a == id).map(|(_, t)| t.as_slice());
        summaries.push(summarize(id, &mine, paths));
    }
    Ok(ExperimentResult {
        config: cfg.clone(),
        outcomes,
        histograms,
        iteration_histograms,
        trajectories,
        summary: Summary {
            experiment: cfg.experiment,
            seed: cfg.seed,
            trials: cfg.trials,
            algorithms: summaries,
            config: cfg.clone(),
        },
        selftest: None,
    })
}

/// Histogram mass above the success threshold as a fraction of the total.
pub fn histogram_success_fraction(h: &Histogram) -> Option<f64> {
    (h.total() > 0).then(|| h.mass_above(SUCCESS_DB) as f64 / h.total() as f64)
}

fn write_csv<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>, header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `histogram.csv`, `iterations.csv`, `trials.csv`, `trajectory.csv`
/// and `summary.json` (or `selftest.txt`) into `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let experiment = result.config.experiment.id();
    if let Some(report) = &result.selftest {
        let path = dir.join("selftest.txt");
        fs::write(&path, format!("{report}\n"))?;
        written.push(path);
        return Ok(written);
    }
    let hist_header = ["bin_lo", "bin_hi", "count", "algorithm", "experiment"];
    let path = dir.join("histogram.csv");
    let rows: Vec<HistogramRow> = result
        .histograms
        .iter()
        .flat_map(|(a, h)| histogram_rows(h, a, experiment))
        .collect();
    write_csv(&path, rows, &hist_header)?;
    written.push(path);

    let path = dir.join("iterations.csv");
    let rows: Vec<HistogramRow> = result
        .iteration_histograms
        .iter()
        .flat_map(|(a, h)| histogram_rows(h, a, experiment))
        .collect();
    write_csv(&path, rows, &hist_header)?;
    written.push(path);

    let path = dir.join("trials.csv");
    let header = [
        "trial",
        "k",
        "algorithm",
        "sir_db",
        "isr_db",
        "iterations",
        "wall_ms",
        "classification",
        "error",
    ];
    write_csv(&path, result.outcomes.iter().map(TrialRow::from), &header)?;
    written.push(path);

    let path = dir.join("trajectory.csv");
    let rows: Vec<TrajectoryRow> = result
        .trajectories
        .iter()
        .flat_map(|(a, t)| mean_trajectory(t, a))
        .collect();
    write_csv(&path, rows, &["iteration", "wall_ms_mean", "isr_db_mean", "algorithm"])?;
    written.push(path);

    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&result.summary)? + "\n")?;
    written.push(path);
    Ok(written)
}
