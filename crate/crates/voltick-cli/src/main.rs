//! Command-line driver for the offline/online split: `simulate` produces
//! ticks, `precompute` builds the structure table, `filter` runs the
//! posterior recursion over a tick file, `validate` cross-checks the filter
//! against the particle reference, and `dump` echoes the parsed config.
//!
//! Exit codes: 0 success, 1 usage, 2 bad data or files, 3 numeric
//! degeneracy past any configured fallback.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use voltick::csvio;
use voltick::{
    particle_oracle, probe_times_every, simulate, total_variation, Config, Filter, FilterOptions,
    OracleOptions, PointKind, StructureTable, TrajectoryPoint, DEFAULT_TABLE_CAP_BYTES,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;

const USAGE_SIMULATE: &str = "voltick simulate --config <FILE> [--seed <N>]";
const USAGE_PRECOMPUTE: &str = "voltick precompute --config <FILE> [--seed <N>] [--threads <N>]";
const USAGE_FILTER: &str = "voltick filter --config <FILE> [--ticks-only | --probe-every <DT>] \
                            [--rk4-step <H>]";
const USAGE_VALIDATE: &str =
    "voltick validate --config <FILE> [--seed <N>] [--threads <N>] [--rk4-step <H>]";

#[derive(Parser)]
#[command(
    name = "voltick",
    version,
    about = "Tracks a hidden finite-state volatility from prices observed at random times"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a volatility path and the ticks it emits
    Simulate(SimulateArgs),
    /// Build the Monte-Carlo structure table and write the table file
    Precompute(PrecomputeArgs),
    /// Run the posterior filter over a tick file
    Filter(FilterArgs),
    /// Run the filter and the particle reference on a fresh simulation and
    /// print a total-variation summary
    Validate(ValidateArgs),
    /// Echo the parsed config in canonical form
    Dump(DumpArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Config file
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Replaces the config seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args)]
struct PrecomputeArgs {
    /// Config file
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Replaces the config seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for the Monte-Carlo build (default: all cores)
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Args)]
struct FilterArgs {
    /// Config file
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Update only at ticks, skipping inter-arrival propagation output
    #[arg(long, conflicts_with = "probe_every")]
    ticks_only: bool,
    /// Emit the propagated posterior every DT time units between ticks
    #[arg(long, value_name = "DT")]
    probe_every: Option<f64>,
    /// Replaces the config integrator step
    #[arg(long, value_name = "H")]
    rk4_step: Option<f64>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Config file
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Replaces the config seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for the particle reference (default: all cores)
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Replaces the config integrator step
    #[arg(long, value_name = "H")]
    rk4_step: Option<f64>,
}

#[derive(Args)]
struct DumpArgs {
    /// Config file
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
}

enum Failure {
    Usage(String, &'static str),
    Engine(voltick::Error),
}

impl From<voltick::Error> for Failure {
    fn from(err: voltick::Error) -> Self {
        Failure::Engine(err)
    }
}

fn exit_code_for(err: &voltick::Error) -> u8 {
    use voltick::Error;
    match err {
        Error::DegenerateLikelihood { .. }
        | Error::DegenerateSurvival { .. }
        | Error::WeightCollapse { .. } => EXIT_DEGENERATE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let requested = matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = err.print();
            return if requested { ExitCode::SUCCESS } else { ExitCode::from(EXIT_USAGE) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg, usage)) => {
            eprintln!("error: {msg}");
            eprintln!("usage: {usage}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Engine(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Precompute(args) => cmd_precompute(args),
        Command::Filter(args) => cmd_filter(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Dump(args) => cmd_dump(args),
    }
}

fn require<'a>(
    value: &'a Option<String>,
    key: &str,
    verb: &str,
    usage: &'static str,
) -> Result<&'a Path, Failure> {
    match value {
        Some(v) => Ok(Path::new(v)),
        None => Err(Failure::Usage(format!("the config has no `{key}`, which `{verb}` needs"), usage)),
    }
}

fn init_threads(threads: Option<usize>, usage: &'static str) -> Result<(), Failure> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into(), usage));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("could not size the thread pool: {e}"), usage))
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let config = Config::from_file(&args.config)?;
    let seed = args.seed.unwrap_or(config.seed);
    let horizon = config.sim_horizon.ok_or_else(|| {
        Failure::Usage("the config has no `sim.horizon`, which `simulate` needs".into(), USAGE_SIMULATE)
    })?;
    let ticks_path = require(&config.paths.ticks, "paths.ticks", "simulate", USAGE_SIMULATE)?;
    let sim = simulate(&config.chain, &config.model, &config.policy, horizon, seed);
    csvio::write_ticks(ticks_path, &sim.ticks)?;
    if let Some(truth) = &config.paths.truth {
        let rows: Vec<(f64, usize)> = sim
            .ticks
            .iter()
            .map(|t| t.time)
            .zip(sim.true_states_at_ticks.iter().copied())
            .collect();
        csvio::write_truth(Path::new(truth), &rows)?;
    }
    eprintln!("wrote {} ticks to {}", sim.ticks.len(), ticks_path.display());
    Ok(())
}

fn cmd_precompute(args: PrecomputeArgs) -> Result<(), Failure> {
    init_threads(args.threads, USAGE_PRECOMPUTE)?;
    let config = Config::from_file(&args.config)?;
    let seed = args.seed.unwrap_or(config.seed);
    let settings = config.grid.as_ref().ok_or_else(|| {
        Failure::Usage("the config has no `grid` section, which `precompute` needs".into(), USAGE_PRECOMPUTE)
    })?;
    let table_path = require(&config.paths.table, "paths.table", "precompute", USAGE_PRECOMPUTE)?;
    let spec = settings.to_spec(&config.model, seed);
    let cap = settings.max_table_mb.map_or(DEFAULT_TABLE_CAP_BYTES, |mb| mb << 20);
    let table =
        StructureTable::build_with_cap(&config.chain, &config.model, &config.policy, spec, cap)?;
    table.save(table_path)?;
    eprintln!(
        "wrote a {}-state table ({} x {} grid, {} paths) to {}",
        config.chain.m(),
        settings.n_t,
        settings.n_z,
        settings.n_paths,
        table_path.display()
    );
    Ok(())
}

fn cmd_filter(args: FilterArgs) -> Result<(), Failure> {
    let config = Config::from_file(&args.config)?;
    let table_path = require(&config.paths.table, "paths.table", "filter", USAGE_FILTER)?;
    let ticks_path = require(&config.paths.ticks, "paths.ticks", "filter", USAGE_FILTER)?;
    let out_path = require(&config.paths.output, "paths.output", "filter", USAGE_FILTER)?;
    let table = StructureTable::load(table_path, &config.chain, &config.model, &config.policy)?;
    let (ticks, logged) = csvio::read_ticks(ticks_path)?;
    if logged {
        eprintln!("note: `price` column in {} was log-transformed", ticks_path.display());
    }
    let probe_every = if args.ticks_only { None } else { args.probe_every.or(config.probe_every) };
    let probes = match probe_every {
        Some(dt) if dt > 0.0 && dt.is_finite() => {
            let horizon = ticks.last().map_or(0.0, |t| t.time);
            probe_times_every(horizon, dt)
        }
        Some(dt) => {
            return Err(Failure::Usage(
                format!("probe interval {dt} must be positive"),
                USAGE_FILTER,
            ))
        }
        None => Vec::new(),
    };
    let opts = FilterOptions {
        rk4_step: args.rk4_step.or(config.rk4_step),
        degenerate_fallback: config.fallback,
    };
    let mut filter = Filter::new(&config.chain, &config.model, &config.policy, &table, opts)?;
    let trajectory = filter.run(&ticks, &probes)?;
    csvio::write_trajectory(out_path, &trajectory)?;
    eprintln!("wrote {} trajectory rows to {}", trajectory.len(), out_path.display());
    Ok(())
}

struct TvSummary {
    count: usize,
    mean: f64,
    max: f64,
}

fn summarize(
    traj: &[TrajectoryPoint<f64>],
    reference: &[TrajectoryPoint<f64>],
    kind: PointKind,
) -> TvSummary {
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (a, b) in traj.iter().zip(reference) {
        if a.kind != kind {
            continue;
        }
        let tv = total_variation(&a.pi, &b.pi);
        count += 1;
        sum += tv;
        max = max.max(tv);
    }
    TvSummary { count, mean: if count > 0 { sum / count as f64 } else { 0.0 }, max }
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Failure> {
    init_threads(args.threads, USAGE_VALIDATE)?;
    let config = Config::from_file(&args.config)?;
    let seed = args.seed.unwrap_or(config.seed);
    let horizon = config.sim_horizon.ok_or_else(|| {
        Failure::Usage("the config has no `sim.horizon`, which `validate` needs".into(), USAGE_VALIDATE)
    })?;
    let table_path = require(&config.paths.table, "paths.table", "validate", USAGE_VALIDATE)?;
    let table = StructureTable::load(table_path, &config.chain, &config.model, &config.policy)?;
    let sim = simulate(&config.chain, &config.model, &config.policy, horizon, seed);
    let probes = config.probe_every.map_or_else(Vec::new, |dt| probe_times_every(horizon, dt));
    let opts = FilterOptions {
        rk4_step: args.rk4_step.or(config.rk4_step),
        degenerate_fallback: config.fallback,
    };
    let mut filter = Filter::new(&config.chain, &config.model, &config.policy, &table, opts)?;
    let trajectory = filter.run(&sim.ticks, &probes)?;
    let particles = config.oracle_particles.unwrap_or(20_000);
    let reference = particle_oracle(
        &config.chain,
        &config.model,
        &config.policy,
        &sim.ticks,
        &probes,
        &OracleOptions { particles, seed },
    )?;

    let ticks = summarize(&trajectory, &reference, PointKind::Tick);
    println!("ticks compared: {}", ticks.count);
    println!("mean tick TV: {:.16e}", ticks.mean);
    println!("max tick TV: {:.16e}", ticks.max);
    if !probes.is_empty() {
        let p = summarize(&trajectory, &reference, PointKind::Probe);
        println!("probes compared: {}", p.count);
        println!("mean probe TV: {:.16e}", p.mean);
        println!("max probe TV: {:.16e}", p.max);
    }
    if let Some(out) = &config.paths.output {
        csvio::write_trajectory(Path::new(out), &trajectory)?;
    }
    if let Some(out) = &config.paths.oracle {
        csvio::write_trajectory(Path::new(out), &reference)?;
    }
    Ok(())
}

fn cmd_dump(args: DumpArgs) -> Result<(), Failure> {
    let config = Config::from_file(&args.config)?;
    print!("{}", config.dump());
    Ok(())
}
