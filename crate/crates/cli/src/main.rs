use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;

use ovr_core::global_solver::{run_with, write_bounds, GlobalResult};
use ovr_core::lower_level::{kkt_report, phi_gradient, ValueFunction};
use ovr_core::oracle::{lattice, lattice_size};
use ovr_core::{Error, Problem, ProblemConfig};

#[derive(Parser)]
#[command(
    name = "ovr",
    version,
    about = "Global solver for bilevel inverse optimal control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the branch-and-bound solver and write its artifacts.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to the number of CPUs.
        #[arg(long)]
        threads: Option<usize>,
        /// Write a triangulation snapshot every N iterations (0 disables).
        #[arg(long, default_value_t = 1)]
        snapshot_every: usize,
    },
    /// Solve the lower-level problem for one parameter.
    LowerLevel {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated parameter, e.g. `0.6,0.3`.
        #[arg(long)]
        beta: String,
        /// Directory for `state.csv` and `control.csv`.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Evaluate the reduced objective on a uniform parameter lattice.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        /// Points per axis.
        #[arg(long)]
        grid: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Maximal number of lower-level solves.
        #[arg(long, default_value_t = 160_000)]
        budget: usize,
        #[arg(long)]
        threads: Option<usize>,
    },
}

/// Failure classes with stable exit codes.
enum Failure {
    Usage(String),
    Solver(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Solver(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Solver(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Usage(_) | Error::Domain(_) => Failure::Usage(e.to_string()),
            _ => Failure::Solver(e.to_string()),
        }
    }
}

fn io_usage(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Usage(format!("{}: {e}", path.display()))
}

fn io_solver(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Solver(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve {
            config,
            out,
            threads,
            snapshot_every,
        } => cmd_solve(&config, &out, threads, snapshot_every),
        Command::LowerLevel { config, beta, dump } => {
            cmd_lower_level(&config, &beta, dump.as_deref())
        }
        Command::Oracle {
            config,
            grid,
            out,
            budget,
            threads,
        } => cmd_oracle(&config, grid, &out, budget, threads),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load(config: &Path) -> Result<(ProblemConfig, Problem), Failure> {
    let cfg = ProblemConfig::from_path(config)?;
    let problem = Problem::new(cfg.clone())?;
    Ok((cfg, problem))
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        b = b.num_threads(t);
    }
    b.build().map_err(|e| Failure::Solver(e.to_string()))
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(io_solver(path))
}

#[derive(Serialize)]
struct Solution<'a> {
    #[serde(flatten)]
    result: &'a GlobalResult,
    config: &'a ProblemConfig,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_path: String,
    config: &'a ProblemConfig,
    version: &'static str,
    threads: usize,
    started_unix: f64,
    finished_unix: f64,
    exit_status: u8,
    message: Option<String>,
    files: Vec<String>,
}

fn write_manifest(out: &Path, manifest: &Manifest) -> Result<(), Failure> {
    let path = out.join("manifest.json");
    let mut f = create_file(&path)?;
    serde_json::to_writer_pretty(&mut f, manifest).map_err(|e| Failure::Solver(e.to_string()))?;
    writeln!(f)
        .and_then(|_| f.flush())
        .map_err(io_solver(&path))
}

fn cmd_solve(
    config: &Path,
    out: &Path,
    threads: Option<usize>,
    every: usize,
) -> Result<(), Failure> {
    let started = unix_seconds();
    let (cfg, problem) = load(config)?;
    let pool = thread_pool(threads)?;
    fs::create_dir_all(out).map_err(io_usage(out))?;

    let mut files = Vec::new();
    let mut last_snapshot: Option<(usize, Vec<u8>)> = None;
    let outcome = pool.install(|| {
        run_with(&problem, |state| {
            let mut buf = Vec::new();
            state.write_triangulation(&mut buf)?;
            if every > 0 && state.iteration % every == 0 {
                let name = format!("triangulation_{:04}.csv", state.iteration);
                fs::write(out.join(&name), &buf)?;
                files.push(name);
                last_snapshot = None;
            } else {
                last_snapshot = Some((state.iteration, buf));
            }
            Ok(())
        })
    });
    if let Some((iteration, buf)) = last_snapshot {
        let name = format!("triangulation_{iteration:04}.csv");
        let path = out.join(&name);
        fs::write(&path, buf).map_err(io_solver(&path))?;
        files.push(name);
    }

    let (status, message) = match &outcome {
        Ok(result) => {
            let path = out.join("bounds.csv");
            let mut f = create_file(&path)?;
            write_bounds(&result.history, &mut f)?;
            f.flush().map_err(io_solver(&path))?;
            files.push("bounds.csv".into());

            let path = out.join("subproblems.csv");
            let mut f = create_file(&path)?;
            writeln!(
                f,
                "simplex,depth,gamma,evaluations,newton_iters,slack,penalized_value,flagged"
            )
            .map_err(io_solver(&path))?;
            for r in &result.records {
                writeln!(
                    f,
                    "{},{},{:.16e},{},{},{:.16e},{:.16e},{}",
                    r.simplex,
                    r.depth,
                    r.gamma,
                    r.evaluations,
                    r.newton_iters,
                    r.slack,
                    r.penalized_value,
                    r.flagged
                )
                .map_err(io_solver(&path))?;
            }
            f.flush().map_err(io_solver(&path))?;
            files.push("subproblems.csv".into());

            let path = out.join("solution.json");
            let mut f = create_file(&path)?;
            let solution = Solution {
                result,
                config: &cfg,
            };
            serde_json::to_writer_pretty(&mut f, &solution)
                .map_err(|e| Failure::Solver(e.to_string()))?;
            writeln!(f)
                .and_then(|_| f.flush())
                .map_err(io_solver(&path))?;
            files.push("solution.json".into());

            println!("beta      = {:?}", result.beta_opt);
            println!("F         = {:.6e}", result.f_opt);
            println!(
                "bounds    = [{:.6e}, {:.6e}], gap {:.3e}",
                result.lower_bound, result.upper_bound, result.gap
            );
            println!(
                "iterations {}, subproblems {}, termination {:?}",
                result.iterations, result.subproblems, result.termination
            );
            (0, None)
        }
        Err(e) => (3, Some(e.to_string())),
    };
    files.push("manifest.json".into());
    write_manifest(
        out,
        &Manifest {
            command: "solve",
            config_path: config.display().to_string(),
            config: &cfg,
            version: env!("CARGO_PKG_VERSION"),
            threads: pool.current_num_threads(),
            started_unix: started,
            finished_unix: unix_seconds(),
            exit_status: status,
            message: message.clone(),
            files,
        },
    )?;
    match outcome {
        Ok(_) => Ok(()),
        Err(e) => Err(Failure::Solver(e.to_string())),
    }
}

fn parse_beta(text: &str, n: usize) -> Result<Vec<f64>, Failure> {
    let beta = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(format!("cannot parse --beta: {e}")))?;
    if beta.len() != n {
        return Err(Failure::Usage(format!(
            "--beta needs {n} components, got {}",
            beta.len()
        )));
    }
    Ok(beta)
}

fn cmd_lower_level(config: &Path, beta: &str, dump: Option<&Path>) -> Result<(), Failure> {
    let (_, problem) = load(config)?;
    let beta = parse_beta(beta, problem.dim())?;
    if !problem.contains(&beta) {
        return Err(Failure::Usage(format!(
            "beta {beta:?} lies outside the box {:?} x {:?}",
            problem.q_lower(),
            problem.q_upper()
        )));
    }
    let vf = ValueFunction::new(&problem);
    let (phi, sol) = vf.value(&beta)?;
    let grad = phi_gradient(&problem, &sol);
    let kkt = kkt_report(&problem, &sol)?;
    println!("phi = {phi:.16e}");
    println!(
        "phi' = [{}]",
        grad.iter()
            .map(|g| format!("{g:.16e}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!("F = {:.16e}", sol.upper_value);
    println!("active set size = {}", sol.active_set_size(&problem));
    println!("newton iterations = {}", sol.newton_iters);
    println!("kkt residual = {:.3e}", kkt.max());
    if let Some(dir) = dump {
        fs::create_dir_all(dir).map_err(io_usage(dir))?;
        for (name, values) in [("state.csv", &sol.y), ("control.csv", &sol.u)] {
            let path = dir.join(name);
            let mut f = create_file(&path)?;
            problem.grid().write_csv(values, &mut f)?;
            f.flush().map_err(io_solver(&path))?;
        }
    }
    Ok(())
}

fn cmd_oracle(
    config: &Path,
    points: usize,
    out: &Path,
    budget: usize,
    threads: Option<usize>,
) -> Result<(), Failure> {
    let (_, problem) = load(config)?;
    if !(2..=400).contains(&points) {
        return Err(Failure::Usage("--grid must lie between 2 and 400".into()));
    }
    match lattice_size(points, problem.dim()) {
        Some(total) if total <= budget => {}
        _ => {
            return Err(Failure::Usage(format!(
                "{points}^{} lattice points exceed the budget of {budget} solves",
                problem.dim()
            )))
        }
    }
    let pool = thread_pool(threads)?;
    let lat = pool.install(|| lattice(&problem, points))?;
    fs::create_dir_all(out).map_err(io_usage(out))?;
    let path = out.join("oracle.csv");
    let mut f = create_file(&path)?;
    lat.write_csv(&mut f)?;
    f.flush().map_err(io_solver(&path))?;
    println!("argmin = {:?}", lat.argmin_beta());
    println!("min = {:.16e}", lat.min());
    Ok(())
}
