//! `rgtd`: command-line front end for the R-GTD policy-evaluation lab.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or parse error, 3 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rgtd_core::environments::{self, DistMode, GeneratorConfig};
use rgtd_core::harness::{self, ExperimentConfig, ExperimentKind, ProblemSource};
use rgtd_core::mdp::EvalProblem;
use rgtd_core::Result;

#[derive(Parser, Debug)]
#[command(name = "rgtd", version, about = "Regularized GTD policy-evaluation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a benchmark problem file.
    Gen(GenArgs),
    /// Print the closed-form report of a problem file.
    Solve {
        problem: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment described by a JSON config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Expansion residuals and prediction-error bound over a grid of c.
    Sweep {
        /// Problem file; the 3-state toy when omitted.
        #[arg(long)]
        problem: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1e2, 1e3, 1e4])]
        c_grid: Vec<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Integrate the primal-dual dynamics and print rank and spectrum certificates.
    Ode {
        #[arg(long)]
        problem: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.4, 1.0])]
        c: Vec<f64>,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Closed-form trajectory of Phi theta_RGTD(c) on the 3-state toy.
    Toy {
        #[arg(long, default_value = "toy_trajectory.csv")]
        out: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct Overrides {
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Env {
    Toy,
    Baird,
    Random,
    Singular,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dist {
    Uniform,
    Stationary,
    Skewed,
}

#[derive(clap::Args, Debug)]
struct GenArgs {
    #[arg(value_enum)]
    env: Env,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_states: usize,
    #[arg(long, default_value_t = 10)]
    n_actions: usize,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 10)]
    n_features: usize,
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `skewed` for `singular`, `uniform` otherwise.
    #[arg(long, value_enum)]
    dist: Option<Dist>,
}

fn load(path: &PathBuf) -> Result<EvalProblem> {
    EvalProblem::from_json(&std::fs::read_to_string(path)?)
}

fn gen(args: &GenArgs) -> Result<()> {
    let dist = match args.dist {
        Some(Dist::Uniform) => DistMode::Uniform,
        Some(Dist::Stationary) => DistMode::Stationary,
        Some(Dist::Skewed) => DistMode::Skewed,
        None if matches!(args.env, Env::Singular) => DistMode::Skewed,
        None => DistMode::Uniform,
    };
    let cfg = GeneratorConfig {
        n_states: args.n_states,
        n_actions: args.n_actions,
        gamma: args.gamma,
        n_features: args.n_features,
        reward_sparsify_threshold: args.threshold,
        seed: args.seed,
        dist_mode: dist,
    };
    let problem = match args.env {
        Env::Toy => environments::toy_3state(),
        Env::Baird => environments::baird(),
        Env::Random => environments::random_mdp(&cfg)?,
        Env::Singular => environments::singular_random_mdp(&cfg)?,
    };
    harness::write_atomic(&args.out, &(problem.to_json()? + "\n"))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn problem_source(path: &Option<PathBuf>) -> Option<ProblemSource> {
    path.as_ref().map(|p| ProblemSource::File { path: p.clone() })
}

fn report_files(out: &harness::ExperimentOutput) {
    for f in &out.files {
        println!("wrote {}", f.display());
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => gen(&args),
        Command::Solve { problem, c, out } => {
            let report = harness::solve(&load(&problem)?, c)?;
            let text = harness::to_json(&report)?;
            print!("{text}");
            if let Some(out) = out {
                harness::write_atomic(&out, &text)?;
            }
            Ok(())
        }
        Command::Run { config, overrides } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(iters) = overrides.iters {
                cfg.iters = iters;
            }
            if let Some(seed) = overrides.seed {
                cfg.seed = seed;
            }
            if let Some(out) = overrides.out {
                cfg.output = out;
            }
            report_files(&harness::run_experiment(&cfg)?);
            Ok(())
        }
        Command::Sweep { problem, c_grid, out } => {
            let mut cfg = ExperimentConfig::new(ExperimentKind::ExpansionSweep);
            cfg.problem = problem_source(&problem);
            cfg.c_grid = c_grid;
            cfg.output = out;
            report_files(&harness::run_experiment(&cfg)?);
            Ok(())
        }
        Command::Ode { problem, c, dt, steps, out } => {
            let mut cfg = ExperimentConfig::new(ExperimentKind::OdeCheck);
            cfg.problem = problem_source(&problem);
            cfg.c = Some(c);
            cfg.dt = dt;
            cfg.steps = steps;
            cfg.output = out;
            let result = harness::run_experiment(&cfg)?;
            if let Some(json) = result.files.iter().find(|f| f.extension().is_some_and(|e| e == "json")) {
                print!("{}", std::fs::read_to_string(json)?);
            }
            report_files(&result);
            Ok(())
        }
        Command::Toy { out } => {
            let toy = harness::toy_trajectory()?;
            harness::write_atomic(&out, &harness::toy_trajectory_csv(&toy))?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(3))
        }
    }
}
