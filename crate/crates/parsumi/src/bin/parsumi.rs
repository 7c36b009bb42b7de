//! Command-line front end: `complete` runs the full recovery pipeline on
//! an observation file, `simulate` writes a synthetic benchmark instance,
//! and `phase-diagram` sweeps missing-data x corruption grids to CSV.
//!
//! Exit codes: 0 success/convergence, 1 input or usage error, 2 solver
//! did not converge. `PARSUMI_THREADS` caps benchmark worker threads.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use parsumi::core::{ObservedMatrix, SolverConfig, DEFAULT_EPSILON};
use parsumi::datagen::{
    generate, phase_diagram, PhaseGridSpec, SolverKind, SyntheticSpec, TrialRecord,
};
use parsumi::driver::{parsumi_solve, Initialization};
use parsumi::io;
use parsumi::Error;

#[derive(Parser)]
#[command(
    name = "parsumi",
    about = "Robust low-rank matrix completion with sparse corruption recovery",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Complete a partially observed matrix and recover corruptions.
    Complete(CompleteArgs),
    /// Generate a synthetic problem instance to files.
    Simulate(SimulateArgs),
    /// Sweep missing-data x corruption grids and write per-trial CSV rows.
    PhaseDiagram(PhaseArgs),
}

#[derive(Args)]
struct SolverFlags {
    /// Target rank r.
    #[arg(short = 'r', long)]
    rank: Option<usize>,
    /// Corruption cardinality bound (default: 15% of the observations).
    #[arg(long)]
    n0: Option<usize>,
    /// Corruption norm bound K_E.
    #[arg(long)]
    ke: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    /// Relative-change stopping tolerance of the outer loop.
    #[arg(long)]
    tol: Option<f64>,
    /// Outer iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat `key = value` config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Disable the Huber-regression booster.
    #[arg(long)]
    no_huber: bool,
    /// Skip the convex initializer and start from zeros.
    #[arg(long)]
    no_init: bool,
}

#[derive(Args)]
struct CompleteArgs {
    /// Observation file: header `m n`, then `i j value` lines.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    solver: SolverFlags,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    #[arg(short = 'r', long)]
    rank: usize,
    /// Fraction of entries hidden, in [0,1).
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
    /// Fraction of observed entries corrupted.
    #[arg(long, default_value_t = 0.0)]
    corrupt: f64,
    /// Corruption value range, two numbers: LO HI.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [-5.0, 5.0], allow_negative_numbers = true)]
    corrupt_range: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Spectrum decay exponent (>1 enables ill-conditioning).
    #[arg(long, default_value_t = 0.0)]
    decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PhaseArgs {
    #[arg(long, default_value_t = 40)]
    m: usize,
    #[arg(long, default_value_t = 60)]
    n: usize,
    #[arg(short = 'r', long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    /// Comma-separated missing fractions (default 0,0.1,...,0.8).
    #[arg(long)]
    missing: Option<String>,
    /// Comma-separated corruption fractions (default 0,0.05,...,0.2).
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [-2.0, 2.0], allow_negative_numbers = true)]
    corrupt_range: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long, default_value = "phase_diagram.csv")]
    out: PathBuf,
    /// Solvers to run: comma-separated subset of parsumi,apg-only.
    #[arg(long, default_value = "parsumi")]
    solvers: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Complete(args) => cmd_complete(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::PhaseDiagram(args) => cmd_phase_diagram(&args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

fn worker_threads() -> Option<usize> {
    std::env::var("PARSUMI_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
}

fn parse_key<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, Error>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|e| Error::Parameter(format!("config key '{key}': {e}"))),
    }
}

/// Precedence: CLI flags > config file keys > built-in defaults.
fn resolve_config(obs: &ObservedMatrix, flags: &SolverFlags) -> Result<SolverConfig, Error> {
    let file: BTreeMap<String, String> = match &flags.config {
        Some(path) => io::read_config_file(path)?,
        None => BTreeMap::new(),
    };

    let rank = flags
        .rank
        .or(parse_key::<usize>(&file, "rank")?)
        .ok_or_else(|| {
            Error::Parameter("missing required --rank (or 'rank' in --config)".into())
        })?;
    let n0 = flags.n0.or(parse_key::<usize>(&file, "n0")?);
    let mut cfg = match n0 {
        Some(n0) => SolverConfig::for_problem_with_n0(obs, rank, n0)?,
        None => SolverConfig::for_problem(obs, rank)?,
    };
    if let Some(ke) = flags.ke.or(parse_key::<f64>(&file, "ke")?) {
        cfg.k_e = ke;
    }
    if let Some(b1) = flags.beta1.or(parse_key::<f64>(&file, "beta1")?) {
        cfg.beta1 = b1;
    }
    if let Some(b2) = flags.beta2.or(parse_key::<f64>(&file, "beta2")?) {
        cfg.beta2 = b2;
    }
    if let Some(tol) = flags.tol.or(parse_key::<f64>(&file, "tol")?) {
        cfg.outer_tol = tol;
    }
    if let Some(mi) = flags.max_iter.or(parse_key::<usize>(&file, "max_iter")?) {
        cfg.outer_max_iter = mi;
    }
    if let Some(seed) = flags.seed.or(parse_key::<u64>(&file, "seed")?) {
        cfg.rng_seed = seed;
    }
    if flags.no_huber {
        cfg.use_huber = false;
    } else if let Some(huber) = parse_key::<bool>(&file, "huber")? {
        cfg.use_huber = huber;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_complete(args: &CompleteArgs) -> Result<ExitCode, Error> {
    let (m, n, entries) = io::read_observations(&args.input)?;
    let obs = ObservedMatrix::new(m, n, &entries, DEFAULT_EPSILON)?;
    let cfg = resolve_config(&obs, &args.solver)?;

    let use_init = if args.solver.no_init {
        false
    } else {
        match &args.solver.config {
            Some(path) => parse_key::<bool>(&io::read_config_file(path)?, "init")?.unwrap_or(true),
            None => true,
        }
    };
    let init = if use_init {
        None
    } else {
        Some(Initialization::zeros(&obs, &cfg)?)
    };

    let out = parsumi_solve(&obs, &cfg, init)?;

    std::fs::create_dir_all(&args.solver.out_dir)?;
    io::write_dense_csv(&args.solver.out_dir.join("completed.csv"), &out.w)?;
    io::write_triplets_csv(
        &args.solver.out_dir.join("corruption.csv"),
        out.e.nonzeros(&obs),
    )?;
    io::write_report_json(
        &args.solver.out_dir.join("report.json"),
        &out.report,
        &cfg,
    )?;

    println!(
        "{} in {} iterations, visible RMSE {:.6e}, {} corruption entries, {} safeguard activations",
        if out.report.converged {
            "converged"
        } else {
            "stopped without convergence"
        },
        out.report.iterations,
        out.report.rmse_visible,
        out.e.nnz(),
        out.report.safeguard_activations,
    );
    Ok(if out.report.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<ExitCode, Error> {
    let spec = SyntheticSpec {
        m: args.m,
        n: args.n,
        rank: args.rank,
        missing_fraction: args.missing,
        corruption_fraction: args.corrupt,
        corruption_range: (args.corrupt_range[0], args.corrupt_range[1]),
        noise_sigma: args.sigma,
        decay_exponent: args.decay,
        seed: args.seed,
    };
    let inst = generate(&spec)?;
    std::fs::create_dir_all(&args.out_dir)?;
    io::write_observations(&args.out_dir.join("observations.txt"), &inst.obs)?;
    io::write_dense_csv(&args.out_dir.join("w_true.csv"), &inst.w_true)?;
    let nonzeros: Vec<(usize, usize, f64)> = (0..args.m)
        .flat_map(|i| (0..args.n).map(move |j| (i, j)))
        .filter(|&(i, j)| inst.e_true[(i, j)] != 0.0)
        .map(|(i, j)| (i, j, inst.e_true[(i, j)]))
        .collect();
    io::write_triplets_csv(&args.out_dir.join("e_true.csv"), nonzeros)?;
    println!(
        "seed {}: wrote {} observations ({} corrupted) to {}",
        args.seed,
        inst.observed_count(),
        inst.corrupted_count(),
        args.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_fraction_list(raw: &str) -> Result<Vec<f64>, Error> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parameter(format!("bad fraction '{s}': {e}")))
        })
        .collect()
}

fn cmd_phase_diagram(args: &PhaseArgs) -> Result<ExitCode, Error> {
    let defaults = PhaseGridSpec::default_benchmark(args.seed);
    let grid = PhaseGridSpec {
        m: args.m,
        n: args.n,
        rank: args.rank,
        missing_fractions: match &args.missing {
            Some(raw) => parse_fraction_list(raw)?,
            None => defaults.missing_fractions,
        },
        corruption_fractions: match &args.corrupt {
            Some(raw) => parse_fraction_list(raw)?,
            None => defaults.corruption_fractions,
        },
        sigma: args.sigma,
        corruption_range: (args.corrupt_range[0], args.corrupt_range[1]),
        trials: args.trials,
        master_seed: args.seed,
    };
    let solvers: Vec<SolverKind> = args
        .solvers
        .split(',')
        .map(SolverKind::parse)
        .collect::<Result<_, _>>()?;
    if solvers.is_empty() {
        return Err(Error::Parameter("no solvers selected".into()));
    }
    let threads = worker_threads();

    if solvers.len() == 1 {
        let records = phase_diagram(&grid, solvers[0], threads)?;
        std::fs::write(&args.out, io::phase_csv(&records, false))?;
        println!("wrote {} rows to {}", records.len(), args.out.display());
    } else {
        let mut all: Vec<TrialRecord> = Vec::new();
        for solver in &solvers {
            all.extend(phase_diagram(&grid, *solver, threads)?);
        }
        std::fs::write(&args.out, io::phase_csv(&all, true))?;
        println!(
            "wrote {} rows ({} solvers) to {}",
            all.len(),
            solvers.len(),
            args.out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}
