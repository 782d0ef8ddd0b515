use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dasm_cli::experiment::DEFAULT_RHO;
use dasm_cli::{
    compare_runs, run_experiment, write_outputs, ChainSpec, ExperimentConfig, Scenario, SolverKind,
};

#[derive(Parser)]
#[command(
    name = "dasm",
    version,
    about = "Closed-loop distributed MPC experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioKind {
    Chain,
    File,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop simulations and write a result bundle.
    Run(RunArgs),
    /// Compare two result bundles of the same scenario and seed.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, value_enum, default_value = "chain")]
    scenario: ScenarioKind,
    /// JSON network description, required with `--scenario file`.
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    masses: usize,
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 30)]
    inits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "asm-dcg")]
    solver: SolverKind,
    #[arg(long, default_value_t = DEFAULT_RHO)]
    rho: f64,
    #[arg(long, default_value_t = 1e-7)]
    eps_dcg: f64,
    #[arg(long, default_value_t = 1e-6)]
    eps_asm: f64,
    /// Bound on initial positions (even state components).
    #[arg(long, default_value_t = 1.0)]
    y0_max: f64,
    /// Bound on initial velocities (odd state components).
    #[arg(long, default_value_t = 0.5)]
    v0_max: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn run(args: RunArgs) -> Result<bool, Box<dyn std::error::Error>> {
    let scenario = match args.scenario {
        ScenarioKind::Chain => Scenario::Chain(ChainSpec {
            masses: args.masses,
            ..ChainSpec::default()
        }),
        ScenarioKind::File => Scenario::File {
            path: args
                .network
                .ok_or("--scenario file requires --network PATH")?,
        },
    };
    let cfg = ExperimentConfig {
        scenario,
        horizon: args.horizon,
        steps: args.steps,
        inits: args.inits,
        seed: args.seed,
        solver: args.solver,
        rho: args.rho,
        eps_dcg: args.eps_dcg,
        eps_asm: args.eps_asm,
        y0_max: args.y0_max,
        v0_max: args.v0_max,
    };
    let res = run_experiment(&cfg)?;
    write_outputs(&res, &args.out)?;
    let failures = res.failures();
    for (init, msg) in &failures {
        eprintln!("init {init} failed: {msg}");
    }
    println!(
        "{}: {} inits, max deviation from centralized {:e}, results in {}",
        cfg.solver.name(),
        res.runs.len(),
        res.max_deviation(),
        args.out.display()
    );
    Ok(failures.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Compare { a, b } => compare_runs(&a, &b)
            .map(|c| {
                print!("{c}");
                true
            })
            .map_err(Into::into),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
