//! Configuration-driven experiment runner and CSV/JSON writers.
//!
//! CSV schemas (header row, UTF-8, LF endings, reals printed with 17 significant digits):
//!
//! ```text
//! trajectories.csv    experiment,algorithm,c,seed,iter,error,diverged
//! statistics.csv      experiment,algorithm,c,iter,median,q1,q3,lo_whisker,hi_whisker,n_outliers
//! toy_trajectory.csv  c,phi_theta_1,phi_theta_2,phi_theta_3,below_c0
//! ode.csv             c,t,dist_to_equilibrium
//! sweep.csv           c,residual,bound_lhs,bound_rhs
//! ```
//!
//! `c` is left empty for algorithms without a regularization parameter. Trajectory and statistics
//! rows are sorted by experiment, algorithm, c, seed and iteration. The last toy-trajectory row is
//! the large-c limit point, with `c = inf`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_form::{self, BoundReport, ExpansionReport, SaddleSolution, NULL_TOL};
use crate::dynamics::{self, Integrator, PdgdSystem, RankCertificate, SpectrumCertificate};
use crate::environments::{self, DistMode, GeneratorConfig};
use crate::error::{Error, Result};
use crate::learners::{self, Algorithm, RunSpec, Sampler, StepSchedule, Trajectory, DEFAULT_STRIDE};
use crate::linalg::{self, Vector};
use crate::mdp::EvalProblem;

pub const DEFAULT_ITERS: u64 = 200_000;
pub const DEFAULT_RUNS: usize = 30;
pub const THREADS_ENV: &str = "RGTD_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ToyTrajectory,
    SingularMain,
    NonsingularRandom,
    Baird,
    OdeCheck,
    ExpansionSweep,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::ToyTrajectory => "toy_trajectory",
            ExperimentKind::SingularMain => "singular_main",
            ExperimentKind::NonsingularRandom => "nonsingular_random",
            ExperimentKind::Baird => "baird",
            ExperimentKind::OdeCheck => "ode_check",
            ExperimentKind::ExpansionSweep => "expansion_sweep",
        }
    }

    fn runs_learners(&self) -> bool {
        !matches!(self, ExperimentKind::OdeCheck | ExperimentKind::ExpansionSweep)
    }
}

/// Where an experiment's problem comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ProblemSource {
    Toy,
    Baird,
    Random(GeneratorConfig),
    SingularRandom(GeneratorConfig),
    File { path: PathBuf },
}

impl ProblemSource {
    pub fn build(&self) -> Result<EvalProblem> {
        match self {
            ProblemSource::Toy => Ok(environments::toy_3state()),
            ProblemSource::Baird => Ok(environments::baird()),
            ProblemSource::Random(cfg) => environments::random_mdp(cfg),
            ProblemSource::SingularRandom(cfg) => environments::singular_random_mdp(cfg),
            ProblemSource::File { path } => EvalProblem::from_json(&fs::read_to_string(path)?),
        }
    }

    fn with_seed(&self, seed: u64) -> Option<Self> {
        match self {
            ProblemSource::Random(cfg) => Some(ProblemSource::Random(GeneratorConfig { seed, ..cfg.clone() })),
            ProblemSource::SingularRandom(cfg) => {
                Some(ProblemSource::SingularRandom(GeneratorConfig { seed, ..cfg.clone() }))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    Rgtd,
    Gtd2,
    Td0,
}

/// Initial parameter vector; `w` and `lambda` always start at zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialTheta {
    /// Unit FIM null vector for singular problems, the projected Baird start for Baird, zero
    /// otherwise.
    #[default]
    Auto,
    Zero,
    Ones,
    NullSpace,
    BairdProjected,
    Explicit(Vec<f64>),
}

/// Reference point of the logged error `||theta_k - theta_ref||`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    #[default]
    ThetaStar,
    /// Each algorithm's own limit: `theta_RGTD(c)` for R-GTD; the GTD2 solution retaining the
    /// null-space part of `theta_0` for GTD2 and TD(0).
    FixedPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub problem: Option<ProblemSource>,
    /// Generator seeds; one problem per seed for generated sources.
    #[serde(default)]
    pub problem_seeds: Vec<u64>,
    #[serde(default)]
    pub algorithms: Option<Vec<AlgorithmName>>,
    #[serde(default)]
    pub c: Option<Vec<f64>>,
    #[serde(default = "default_iters")]
    pub iters: u64,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    /// Run `i` uses seed `seed + i`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: StepSchedule,
    #[serde(default = "default_stride")]
    pub stride: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub theta0: InitialTheta,
    #[serde(default)]
    pub reference: Reference,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default = "default_c_grid")]
    pub c_grid: Vec<f64>,
}

fn default_iters() -> u64 {
    DEFAULT_ITERS
}
fn default_runs() -> usize {
    DEFAULT_RUNS
}
fn default_stride() -> u64 {
    DEFAULT_STRIDE
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_dt() -> f64 {
    dynamics::DEFAULT_DT
}
fn default_steps() -> usize {
    10_000
}
fn default_c_grid() -> Vec<f64> {
    vec![1e2, 1e3, 1e4]
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            problem: None,
            problem_seeds: Vec::new(),
            algorithms: None,
            c: None,
            iters: DEFAULT_ITERS,
            n_runs: DEFAULT_RUNS,
            seed: 0,
            schedule: StepSchedule::Standard,
            stride: DEFAULT_STRIDE,
            output: default_output(),
            theta0: InitialTheta::Auto,
            reference: Reference::ThetaStar,
            threads: None,
            dt: dynamics::DEFAULT_DT,
            steps: default_steps(),
            integrator: Integrator::Rk4,
            c_grid: default_c_grid(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::Config { field: field.into(), reason });
        if self.n_runs == 0 {
            return bad("n_runs", "must be at least 1".into());
        }
        if self.stride == 0 {
            return bad("stride", "must be positive".into());
        }
        if let Some(&c) = self.c_values().iter().find(|&&c| !(c > 0.0 && c.is_finite())) {
            return bad("c", format!("entries must be positive, got {c}"));
        }
        if self.algorithms().is_empty() && self.kind.runs_learners() {
            return bad("algorithms", "must name at least one algorithm".into());
        }
        self.schedule.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", "must be positive".into());
        }
        if self.kind == ExperimentKind::OdeCheck && self.steps == 0 {
            return bad("steps", "must be positive".into());
        }
        if self.kind == ExperimentKind::ExpansionSweep {
            if self.c_grid.len() < 3 {
                return bad("c_grid", "needs at least 3 values for a slope fit".into());
            }
            if self.c_grid.windows(2).any(|w| !(w[0] < w[1])) || self.c_grid.iter().any(|&c| !(c > 0.0)) {
                return bad("c_grid", "must be positive and strictly ascending".into());
            }
        }
        if let Some(threads) = self.threads {
            if threads == 0 {
                return bad("threads", "must be positive".into());
            }
        }
        if !self.problem_seeds.is_empty() && !matches!(self.problem_source(), ProblemSource::Random(_) | ProblemSource::SingularRandom(_)) {
            return bad("problem_seeds", "only applies to generated problems".into());
        }
        Ok(())
    }

    pub fn algorithms(&self) -> Vec<AlgorithmName> {
        self.algorithms.clone().unwrap_or_else(|| match self.kind {
            ExperimentKind::Baird => vec![AlgorithmName::Gtd2, AlgorithmName::Rgtd, AlgorithmName::Td0],
            _ => vec![AlgorithmName::Gtd2, AlgorithmName::Rgtd],
        })
    }

    pub fn c_values(&self) -> Vec<f64> {
        self.c.clone().unwrap_or_else(|| match self.kind {
            ExperimentKind::ToyTrajectory | ExperimentKind::Baird => vec![1.0],
            _ => vec![0.2, 0.4, 1.0],
        })
    }

    pub fn problem_source(&self) -> ProblemSource {
        self.problem.clone().unwrap_or_else(|| match self.kind {
            ExperimentKind::ToyTrajectory | ExperimentKind::OdeCheck | ExperimentKind::ExpansionSweep => {
                ProblemSource::Toy
            }
            ExperimentKind::Baird => ProblemSource::Baird,
            ExperimentKind::SingularMain => {
                ProblemSource::SingularRandom(GeneratorConfig { dist_mode: DistMode::Skewed, ..GeneratorConfig::large(0) })
            }
            ExperimentKind::NonsingularRandom => ProblemSource::Random(GeneratorConfig { gamma: 0.9, ..GeneratorConfig::large(0) }),
        })
    }

    fn problem_seed_list(&self) -> Vec<u64> {
        if self.problem_seeds.is_empty() && self.problem.is_none() && self.kind == ExperimentKind::NonsingularRandom {
            vec![1, 2, 3]
        } else {
            self.problem_seeds.clone()
        }
    }

    /// `(label, problem)` pairs: one per problem seed, or the single configured problem.
    pub fn problems(&self) -> Result<Vec<(String, EvalProblem)>> {
        let source = self.problem_source();
        let seeds = self.problem_seed_list();
        if seeds.is_empty() {
            return Ok(vec![(self.kind.name().to_string(), source.build()?)]);
        }
        seeds
            .iter()
            .map(|&s| {
                let src = source.with_seed(s).expect("validated generated source");
                Ok((format!("{}-p{s}", self.kind.name()), src.build()?))
            })
            .collect()
    }

    /// Algorithm variants, R-GTD expanded over every `c`.
    pub fn variants(&self) -> Vec<Algorithm> {
        let mut out = Vec::new();
        for name in self.algorithms() {
            match name {
                AlgorithmName::Rgtd => out.extend(self.c_values().into_iter().map(|c| Algorithm::Rgtd { c })),
                AlgorithmName::Gtd2 => out.push(Algorithm::Gtd2),
                AlgorithmName::Td0 => out.push(Algorithm::Td0),
            }
        }
        out
    }
}

/// Resolves the configured initial point for `problem`.
pub fn initial_theta(choice: &InitialTheta, kind: ExperimentKind, problem: &EvalProblem) -> Result<Vector> {
    let q = problem.n_features();
    let null_start = || -> Result<Option<Vector>> {
        if !problem.features().is_full_rank() {
            return Ok(None);
        }
        let cm = closed_form::assemble(problem)?;
        Ok(environments::null_space_start(&cm.fim, problem.theta_star()))
    };
    match choice {
        InitialTheta::Zero => Ok(Vector::zeros(q)),
        InitialTheta::Ones => Ok(Vector::from_element(q, 1.0)),
        InitialTheta::BairdProjected => {
            if q != 8 {
                return Err(Error::Config { field: "theta0".into(), reason: "baird_projected needs 8 features".into() });
            }
            Ok(environments::baird_initial_theta())
        }
        InitialTheta::NullSpace => null_start()?.ok_or_else(|| Error::Config {
            field: "theta0".into(),
            reason: "null_space start needs a singular FIM".into(),
        }),
        InitialTheta::Explicit(v) => {
            if v.len() != q {
                return Err(Error::Config { field: "theta0".into(), reason: format!("needs {q} entries") });
            }
            Ok(Vector::from_vec(v.clone()))
        }
        InitialTheta::Auto => {
            if kind == ExperimentKind::Baird && q == 8 {
                return Ok(environments::baird_initial_theta());
            }
            Ok(null_start()?.unwrap_or_else(|| Vector::zeros(q)))
        }
    }
}

/// Reference point for `algorithm` started from `theta0`.
pub fn reference_point(reference: Reference, problem: &EvalProblem, algorithm: Algorithm, theta0: &Vector) -> Result<Vector> {
    match reference {
        Reference::ThetaStar => Ok(problem.theta_star().clone()),
        Reference::FixedPoint => {
            let cm = closed_form::assemble(problem)?;
            match algorithm {
                Algorithm::Rgtd { c } => closed_form::rgtd_solution(&cm, c),
                Algorithm::Gtd2 | Algorithm::Td0 => {
                    let set = closed_form::gtd2_solutions(&cm, NULL_TOL);
                    Ok(&set.particular + set.null_projector() * theta0)
                }
            }
        }
    }
}

/// A trajectory tagged with the experiment label it belongs to.
#[derive(Clone, Debug)]
pub struct LabeledTrajectory {
    pub experiment: String,
    pub trajectory: Trajectory,
}

/// Runs `n_runs` seeds (`seed_base + i`) of each variant on a bounded worker pool. Output order is
/// variant-major, then seed, independent of scheduling.
pub fn run_seeds(
    problem: &EvalProblem,
    variants: &[(Algorithm, Vector, Vector)],
    schedule: StepSchedule,
    iters: u64,
    stride: u64,
    n_runs: usize,
    seed_base: u64,
    threads: Option<usize>,
) -> Result<Vec<Trajectory>> {
    let sampler = Sampler::new(problem);
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| (0..n_runs as u64).map(move |i| (v, seed_base.wrapping_add(i))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(threads))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(v, seed)| {
                let (algorithm, theta0, theta_ref) = &variants[v];
                let spec = RunSpec {
                    algorithm: *algorithm,
                    schedule,
                    iters,
                    stride,
                    theta0: theta0.as_slice().to_vec(),
                    theta_ref: theta_ref.as_slice().to_vec(),
                };
                learners::run(&sampler, &spec, seed)
            })
            .collect()
    })
}

/// Pool size: the configured count (default: available parallelism), capped by `RGTD_THREADS`.
pub fn worker_count(configured: Option<usize>) -> usize {
    let base = configured.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    cap.map_or(base, |c| base.min(c)).max(1)
}

/// Across-run summary of one logged iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunStatistics {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    /// Smallest sample not below `q1 - 1.5 IQR`.
    pub lo_whisker: f64,
    /// Largest sample not above `q3 + 1.5 IQR`.
    pub hi_whisker: f64,
    pub outliers: Vec<f64>,
}

/// Quantile of ascending `sorted` by linear interpolation between closest ranks (inclusive
/// method): position `h = (n - 1) p`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let (a, b) = (sorted[lo], sorted[hi]);
    if lo == hi || a == b {
        a
    } else {
        a + (h - lo as f64) * (b - a)
    }
}

impl RunStatistics {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile(&sorted, 0.25);
        let q3 = quantile(&sorted, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) =
            if iqr.is_finite() { (q1 - 1.5 * iqr, q3 + 1.5 * iqr) } else { (f64::NEG_INFINITY, f64::INFINITY) };
        let inside = || sorted.iter().copied().filter(|&x| x >= lo_fence && x <= hi_fence);
        RunStatistics {
            median: quantile(&sorted, 0.5),
            q1,
            q3,
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            lo_whisker: inside().next().unwrap_or(q1),
            hi_whisker: inside().next_back().unwrap_or(q3),
            outliers: sorted.iter().copied().filter(|&x| x < lo_fence || x > hi_fence).collect(),
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatisticsRow {
    pub experiment: String,
    pub algorithm: String,
    pub c: Option<f64>,
    pub iter: u64,
    pub stats: RunStatistics,
}

/// One statistics row per `(experiment, algorithm, c, logged iteration)`.
pub fn summarize(trajectories: &[LabeledTrajectory]) -> Vec<StatisticsRow> {
    let mut groups: Vec<(&str, Algorithm, Vec<&Trajectory>)> = Vec::new();
    for lt in sorted_refs(trajectories) {
        match groups.last_mut() {
            Some((e, a, list)) if *e == lt.experiment && *a == lt.trajectory.algorithm => list.push(&lt.trajectory),
            _ => groups.push((&lt.experiment, lt.trajectory.algorithm, vec![&lt.trajectory])),
        }
    }
    let mut rows = Vec::new();
    for (experiment, algorithm, list) in groups {
        for (idx, &iter) in list[0].iters.iter().enumerate() {
            let samples: Vec<f64> = list.iter().map(|t| t.errors[idx]).collect();
            rows.push(StatisticsRow {
                experiment: experiment.to_string(),
                algorithm: algorithm.tag().to_string(),
                c: algorithm.c(),
                iter,
                stats: RunStatistics::from_samples(&samples),
            });
        }
    }
    rows
}

fn sorted_refs(trajectories: &[LabeledTrajectory]) -> Vec<&LabeledTrajectory> {
    let mut refs: Vec<&LabeledTrajectory> = trajectories.iter().collect();
    refs.sort_by(|a, b| {
        a.experiment
            .cmp(&b.experiment)
            .then_with(|| a.trajectory.algorithm.tag().cmp(b.trajectory.algorithm.tag()))
            .then_with(|| {
                let (ca, cb) = (a.trajectory.algorithm.c().unwrap_or(0.0), b.trajectory.algorithm.c().unwrap_or(0.0));
                ca.total_cmp(&cb)
            })
            .then_with(|| a.trajectory.seed.cmp(&b.trajectory.seed))
    });
    refs
}

/// 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_c(c: Option<f64>) -> String {
    c.map(fmt_real).unwrap_or_default()
}

pub const TRAJECTORY_HEADER: &str = "experiment,algorithm,c,seed,iter,error,diverged";
pub const STATISTICS_HEADER: &str = "experiment,algorithm,c,iter,median,q1,q3,lo_whisker,hi_whisker,n_outliers";

pub fn trajectories_csv(trajectories: &[LabeledTrajectory]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for lt in sorted_refs(trajectories) {
        let t = &lt.trajectory;
        let c = fmt_c(t.algorithm.c());
        for (&iter, &err) in t.iters.iter().zip(&t.errors) {
            let diverged = t.diverged_at.is_some_and(|k| iter >= k);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                lt.experiment,
                t.algorithm.tag(),
                c,
                t.seed,
                iter,
                fmt_real(err),
                u8::from(diverged)
            ));
        }
    }
    out
}

pub fn statistics_csv(rows: &[StatisticsRow]) -> String {
    let mut out = String::from(STATISTICS_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.stats;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.experiment,
            r.algorithm,
            fmt_c(r.c),
            r.iter,
            fmt_real(s.median),
            fmt_real(s.q1),
            fmt_real(s.q3),
            fmt_real(s.lo_whisker),
            fmt_real(s.hi_whisker),
            s.outliers.len()
        ));
    }
    out
}

/// Writes `contents` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub files: Vec<PathBuf>,
    pub trajectories: Vec<LabeledTrajectory>,
    pub statistics: Vec<StatisticsRow>,
}

/// Runs the configured experiment and writes its result files into `config.output`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let mut out = ExperimentOutput::default();
    let dir = &config.output;
    let problems = config.problems()?;
    match config.kind {
        ExperimentKind::OdeCheck => {
            let (_, problem) = &problems[0];
            let report = ode_check(problem, &config.c_values(), config, &config.theta0)?;
            out.files.push(write_file(dir, "ode.csv", &ode_csv(&report))?);
            out.files.push(write_file(dir, "ode_report.json", &to_json(&report.iter().map(OdeReport::summary).collect::<Vec<_>>())?)?);
        }
        ExperimentKind::ExpansionSweep => {
            let (_, problem) = &problems[0];
            let report = sweep(problem, &config.c_grid)?;
            out.files.push(write_file(dir, "sweep.csv", &sweep_csv(&report.bound))?);
            out.files.push(write_file(dir, "sweep_report.json", &to_json(&report)?)?);
        }
        _ => {
            for (label, problem) in &problems {
                let theta0 = initial_theta(&config.theta0, config.kind, problem)?;
                let variants = config
                    .variants()
                    .into_iter()
                    .map(|a| Ok((a, theta0.clone(), reference_point(config.reference, problem, a, &theta0)?)))
                    .collect::<Result<Vec<_>>>()?;
                let runs = run_seeds(
                    problem,
                    &variants,
                    config.schedule,
                    config.iters,
                    config.stride,
                    config.n_runs,
                    config.seed,
                    config.threads,
                )?;
                out.trajectories
                    .extend(runs.into_iter().map(|trajectory| LabeledTrajectory { experiment: label.clone(), trajectory }));
            }
            out.statistics = summarize(&out.trajectories);
            out.files.push(write_file(dir, "trajectories.csv", &trajectories_csv(&out.trajectories))?);
            out.files.push(write_file(dir, "statistics.csv", &statistics_csv(&out.statistics))?);
            if config.kind == ExperimentKind::ToyTrajectory {
                out.files.push(write_file(dir, "toy_trajectory.csv", &toy_trajectory_csv(&toy_trajectory()?))?);
            }
        }
    }
    Ok(out)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, contents)?;
    Ok(path)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Closed-form summary of one problem at one `c`.
#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub n_states: usize,
    pub n_features: usize,
    pub c: f64,
    pub fim_singular_values: Vec<f64>,
    /// Smallest over largest singular value of the FIM.
    pub fim_singular_ratio: f64,
    pub singular: bool,
    pub null_dim: usize,
    #[serde(serialize_with = "linalg::ser_vector")]
    pub gtd2_particular: Vector,
    #[serde(serialize_with = "linalg::ser_matrix")]
    pub gtd2_null_basis: linalg::Mat,
    pub saddle: SaddleSolution,
    pub kkt_residuals: [f64; 3],
    #[serde(serialize_with = "linalg::ser_vector")]
    pub theta_star: Vector,
    #[serde(serialize_with = "ser_opt_vector")]
    pub k: Option<Vector>,
    /// Expansion threshold `c0`.
    pub c0: f64,
    /// `||theta_RGTD(c) - theta_lim||` where `theta_lim` is the minimum-norm GTD2 solution.
    pub rgtd_to_gtd2_limit: f64,
    pub bound: BoundReport,
}

fn ser_opt_vector<S: serde::Serializer>(v: &Option<Vector>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.collect_seq(v.iter()),
        None => s.serialize_none(),
    }
}

pub fn solve(problem: &EvalProblem, c: f64) -> Result<SolveReport> {
    let cm = closed_form::assemble(problem)?;
    let set = closed_form::gtd2_solutions(&cm, NULL_TOL);
    let saddle = closed_form::saddle_point(&cm, c)?;
    let sv = linalg::singular_values(&cm.fim);
    let ratio = match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if hi > 0.0 => lo / hi,
        _ => 0.0,
    };
    let theta_rgtd = closed_form::rgtd_solution(&cm, c)?;
    Ok(SolveReport {
        n_states: problem.n_states(),
        n_features: problem.n_features(),
        c,
        fim_singular_ratio: ratio,
        fim_singular_values: sv,
        singular: !set.is_singleton(),
        null_dim: set.dim(),
        kkt_residuals: closed_form::kkt_residuals(&cm, &saddle),
        saddle,
        theta_star: problem.theta_star().clone(),
        k: cm.k.clone(),
        c0: closed_form::expansion_threshold(&cm, &set)?,
        rgtd_to_gtd2_limit: (&theta_rgtd - set.orthogonal_member()).norm(),
        bound: closed_form::prediction_error_bound_check(problem, &[c])?,
        gtd2_null_basis: set.null_basis.clone(),
        gtd2_particular: set.particular,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyRow {
    pub c: f64,
    pub phi_theta: [f64; 3],
    pub below_c0: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyTrajectory {
    pub c0: f64,
    pub rows: Vec<ToyRow>,
    /// `Phi (theta_GTD2 - Pi_N theta_GTD2)`.
    pub limit: [f64; 3],
}

pub const TOY_GRID_POINTS: usize = 100;

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1).max(1) as f64)).collect()
}

/// Closed-form path `c -> Phi theta_RGTD(c)` on the toy, `c` from `1e-1` to `1e4`.
pub fn toy_trajectory() -> Result<ToyTrajectory> {
    let problem = environments::toy_3state();
    let cm = closed_form::assemble(&problem)?;
    let set = closed_form::gtd2_solutions(&cm, NULL_TOL);
    let c0 = closed_form::expansion_threshold(&cm, &set)?;
    let to3 = |v: Vector| [v[0], v[1], v[2]];
    let rows = log_grid(1e-1, 1e4, TOY_GRID_POINTS)
        .into_iter()
        .map(|c| {
            let theta = closed_form::rgtd_solution(&cm, c)?;
            Ok(ToyRow { c, phi_theta: to3(&cm.phi * theta), below_c0: c <= c0 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyTrajectory { c0, rows, limit: to3(&cm.phi * set.orthogonal_member()) })
}

pub fn toy_trajectory_csv(toy: &ToyTrajectory) -> String {
    let mut out = String::from("c,phi_theta_1,phi_theta_2,phi_theta_3,below_c0\n");
    let line = |c: f64, p: &[f64; 3], flag: u8| {
        format!("{},{},{},{},{}\n", fmt_real(c), fmt_real(p[0]), fmt_real(p[1]), fmt_real(p[2]), flag)
    };
    for r in &toy.rows {
        out.push_str(&line(r.c, &r.phi_theta, u8::from(r.below_c0)));
    }
    out.push_str(&line(f64::INFINITY, &toy.limit, 0));
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub expansion: ExpansionReport,
    pub bound: BoundReport,
}

pub fn sweep(problem: &EvalProblem, c_grid: &[f64]) -> Result<SweepReport> {
    let cm = closed_form::assemble(problem)?;
    let set = closed_form::gtd2_solutions(&cm, NULL_TOL);
    Ok(SweepReport {
        expansion: closed_form::expansion_check(&cm, &set, c_grid)?,
        bound: closed_form::prediction_error_bound_check(problem, c_grid)?,
    })
}

pub fn sweep_csv(bound: &BoundReport) -> String {
    let mut out = String::from("c,residual,bound_lhs,bound_rhs\n");
    for r in &bound.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_real(r.c),
            fmt_real(r.residual),
            fmt_real(r.bound_lhs),
            fmt_real(r.bound_rhs)
        ));
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct OdeReport {
    pub c: f64,
    pub rank: RankCertificate,
    /// Rank of the FIM block alone, for contrast.
    pub fim_rank: RankCertificate,
    pub spectrum: SpectrumCertificate,
    pub trace: dynamics::OdeTrace,
    pub shrink_factor: f64,
    /// `(rate, intercept, r_squared)` of `ln dist` against `t` over the final half.
    pub log_linear_fit: Option<(f64, f64, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct OdeSummary {
    pub c: f64,
    pub rank: RankCertificate,
    pub fim_rank: RankCertificate,
    pub spectrum: SpectrumCertificate,
    pub dt: f64,
    pub halvings: u32,
    pub shrink_factor: f64,
    pub log_linear_fit: Option<(f64, f64, f64)>,
}

impl OdeReport {
    pub fn summary(&self) -> OdeSummary {
        OdeSummary {
            c: self.c,
            rank: self.rank.clone(),
            fim_rank: self.fim_rank.clone(),
            spectrum: self.spectrum.clone(),
            dt: self.trace.dt,
            halvings: self.trace.halvings,
            shrink_factor: self.shrink_factor,
            log_linear_fit: self.log_linear_fit,
        }
    }
}

/// Certificates and an integrated trajectory from `[theta0; 0; 0]` for each `c`.
pub fn ode_check(problem: &EvalProblem, cs: &[f64], config: &ExperimentConfig, theta0: &InitialTheta) -> Result<Vec<OdeReport>> {
    let cm = closed_form::assemble(problem)?;
    let start = initial_theta(theta0, ExperimentKind::OdeCheck, problem)?;
    let q = cm.n_features();
    cs.iter()
        .map(|&c| {
            let sys = PdgdSystem::new(&cm, c)?;
            let mut x0 = Vector::zeros(3 * q);
            x0.rows_mut(0, q).copy_from(&start);
            let trace = dynamics::integrate(&sys, &x0, config.dt, config.steps, config.integrator)?;
            Ok(OdeReport {
                c,
                rank: dynamics::rank_certificate(&sys, 1e-10),
                fim_rank: dynamics::block_rank_certificate(&cm.fim, 1e-10),
                spectrum: dynamics::spectrum_certificate(&sys)?,
                shrink_factor: trace.shrink_factor(),
                log_linear_fit: trace.log_linear_fit(),
                trace,
            })
        })
        .collect()
}

pub fn ode_csv(reports: &[OdeReport]) -> String {
    let mut out = String::from("c,t,dist_to_equilibrium\n");
    for r in reports {
        for (t, d) in r.trace.times.iter().zip(&r.trace.distances) {
            out.push_str(&format!("{},{},{}\n", fmt_real(r.c), fmt_real(*t), fmt_real(*d)));
        }
    }
    out
}
