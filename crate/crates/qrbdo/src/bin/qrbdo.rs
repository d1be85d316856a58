//! Command-line front end: run benchmarks or configured problems, emit
//! machine-readable artifacts, and regenerate plot-ready report CSVs.
//!
//! Exit codes: 0 on feasible convergence, 2 when the run (or any
//! replication) ends infeasible, 1 on errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qrbdo::benchmarks;
use qrbdo::config::{apply_json_overrides, apply_problem_overrides, ProblemOverrides};
use qrbdo::error::{QrbdoError, Result};
use qrbdo::optimizer::{run_qrbdo, RbdoResult};
use qrbdo::output;
use qrbdo::rng::{derive_seed, Stream};
use qrbdo::RunConfig;

#[derive(Parser)]
#[command(
    name = "qrbdo",
    version,
    about = "Quantile-based reliability design optimization on adaptive Kriging surrogates"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a problem (built-in benchmark or configuration file).
    Run(RunArgs),
    /// Regenerate plot-ready CSVs from an existing run directory.
    Report { run_dir: PathBuf },
    /// List the built-in problems.
    List,
}

#[derive(Args)]
struct RunArgs {
    /// Built-in problem name (column, choi, bracket, janusevskis).
    #[arg(long)]
    problem: Option<String>,
    /// JSON configuration file; may set "problem", any run setting, and
    /// problem "overrides" (thresholds, alphas/target_pf, env marginals).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    /// Output directory (one subdirectory per replication when > 1).
    #[arg(long, default_value = "qrbdo_out")]
    out: PathBuf,
    /// Estimate quantiles on the true models instead of surrogates.
    #[arg(long)]
    brute_force: bool,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long)]
    doe0: Option<usize>,
    #[arg(long)]
    k_local: Option<usize>,
    #[arg(long)]
    k_global: Option<usize>,
    #[arg(long)]
    eta_bar: Option<f64>,
    /// Skip the local refinement on the final surrogate.
    #[arg(long)]
    no_refine: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Report { run_dir } => {
            output::report(&run_dir)?;
            println!("report written to {}", run_dir.join("report").display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::List => {
            for name in benchmarks::NAMES {
                let b = benchmarks::by_name(name)?;
                let reference = b
                    .problem
                    .reference
                    .as_ref()
                    .map(|r| format!(" (reference cost {})", r.cost))
                    .unwrap_or_default();
                println!(
                    "{name}: {} design vars, {} hard constraints{reference}",
                    b.problem.s_d(),
                    b.problem.n_hard()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

struct Job {
    problem_name: String,
    overrides: Option<ProblemOverrides>,
    config: RunConfig,
}

impl Job {
    fn build_problem(&self) -> Result<qrbdo::Problem> {
        let mut problem = benchmarks::by_name(&self.problem_name)?.problem;
        if let Some(o) = &self.overrides {
            apply_problem_overrides(&mut problem, o)?;
        }
        Ok(problem)
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    // Configuration file: "problem" and "overrides" keys plus run settings.
    let mut file_value = serde_json::Value::Object(Default::default());
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        file_value = serde_json::from_str(&text)
            .map_err(|e| QrbdoError::Config(format!("{}: {e}", path.display())))?;
    }
    let obj = file_value
        .as_object_mut()
        .ok_or_else(|| QrbdoError::Config("config file must be a JSON object".into()))?;
    let file_problem = match obj.remove("problem") {
        Some(serde_json::Value::String(s)) => Some(s),
        Some(_) => {
            return Err(QrbdoError::Config("problem: expected a string".into()));
        }
        None => None,
    };
    let overrides: Option<ProblemOverrides> = match obj.remove("overrides") {
        Some(v) => Some(
            serde_json::from_value(v)
                .map_err(|e| QrbdoError::Config(format!("overrides: {e}")))?,
        ),
        None => None,
    };

    let problem_name = args
        .problem
        .clone()
        .or(file_problem)
        .ok_or_else(|| QrbdoError::Config("problem: set --problem or the config key".into()))?;

    let bench = benchmarks::by_name(&problem_name)?;
    let mut config = apply_json_overrides(&bench.config, &serde_json::Value::Object(obj.clone()))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(r) = args.replications {
        config.replications = r;
    }
    if args.brute_force {
        config.brute_force = true;
    }
    if let Some(v) = args.budget {
        config.budget = v;
    }
    if let Some(v) = args.n_mc {
        config.n_mc = v;
    }
    if let Some(v) = args.doe0 {
        config.doe0 = v;
    }
    if let Some(v) = args.k_local {
        config.k_local = v;
    }
    if let Some(v) = args.k_global {
        config.k_global = v;
    }
    if let Some(v) = args.eta_bar {
        config.eta_bar = v;
    }
    if args.no_refine {
        config.refine = false;
    }
    config.validate()?;

    let job = Job {
        problem_name,
        overrides,
        config,
    };

    if job.config.replications == 1 {
        let problem = job.build_problem()?;
        let result = run_qrbdo(&problem, &job.config)?;
        output::write_run_artifacts(&args.out, &problem, &result)?;
        print_result_line(&result, &args.out);
        return Ok(exit_for(&[result]));
    }

    let results = run_replications(&job, &args.out)?;
    let summary = output::summarize(&results);
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!(
        "{} replications: calls min/median/max = {}/{}/{}, cost median = {}, feasible = {}/{}",
        summary.replications,
        summary.calls_min,
        summary.calls_median,
        summary.calls_max,
        summary.cost_median,
        summary.feasible,
        summary.replications
    );
    Ok(exit_for(&results))
}

// Replications run with seeds derived from the base seed; a thread count
// from QRBDO_THREADS (default 1) fans them out. Outputs are per
// replication, so the schedule cannot affect the artifacts.
fn run_replications(job: &Job, out: &Path) -> Result<Vec<RbdoResult>> {
    let reps = job.config.replications;
    let threads: usize = std::env::var("QRBDO_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
        .max(1);

    let run_one = |r: usize| -> Result<RbdoResult> {
        let mut cfg = job.config.clone();
        cfg.seed = derive_seed(job.config.seed, Stream::Replication, &[r as u64]);
        cfg.replications = 1;
        let problem = job.build_problem()?;
        let result = run_qrbdo(&problem, &cfg)?;
        output::write_run_artifacts(&out.join(format!("rep_{r:03}")), &problem, &result)?;
        Ok(result)
    };

    let mut results: Vec<Option<RbdoResult>> = Vec::new();
    for _ in 0..reps {
        results.push(None);
    }
    if threads == 1 {
        for (r, slot) in results.iter_mut().enumerate() {
            let res = run_one(r)?;
            print_result_line(&res, &out.join(format!("rep_{r:03}")));
            *slot = Some(res);
        }
    } else {
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for offset in 0..threads {
                let run_one = &run_one;
                handles.push(scope.spawn(move || -> Result<Vec<(usize, RbdoResult)>> {
                    let mut acc = Vec::new();
                    let mut r = offset;
                    while r < reps {
                        acc.push((r, run_one(r)?));
                        r += threads;
                    }
                    Ok(acc)
                }));
            }
            let mut collected = Vec::new();
            for h in handles {
                let batch = h
                    .join()
                    .map_err(|_| QrbdoError::Numeric("replication thread panicked".into()))?;
                collected.extend(batch?);
            }
            for (r, res) in collected {
                results[r] = Some(res);
            }
            Ok(())
        })?;
        for (r, res) in results.iter().enumerate() {
            if let Some(res) = res {
                print_result_line(res, &out.join(format!("rep_{r:03}")));
            }
        }
    }
    Ok(results.into_iter().map(|r| r.expect("all reps ran")).collect())
}

fn print_result_line(res: &RbdoResult, dir: &Path) {
    println!(
        "{}: d* = [{}], cost = {:.6}, calls = {}, {} -> {}",
        res.problem,
        res.d_star
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
        res.cost,
        res.true_model_calls,
        if res.feasible { "feasible" } else { "INFEASIBLE" },
        dir.display()
    );
}

fn exit_for(results: &[RbdoResult]) -> ExitCode {
    if results.iter().all(|r| r.feasible) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}
