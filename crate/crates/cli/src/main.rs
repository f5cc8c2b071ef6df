//! `boemit`: command line harness over the bo-emission library.
//!
//! Exit codes: 0 success, 1 I/O, 2 validation or parse failure, 3 budget, 4 numerical
//! convergence failure.

use std::path::PathBuf;
use std::process::ExitCode;

use bo_emission::decay::Method;
use bo_emission::harness::{default_out_dir, fit_results, parse_config, run, ExperimentConfig, Task};
use bo_emission::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "boemit", version, about = "Spontaneous emission of Born-Oppenheimer molecules on a 1D nuclear grid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Band energies, gaps, dipoles and Berry connection (bands.csv)
    Bands(RunArgs),
    /// Full molecular propagation by Strang splitting
    PropagateFull(RunArgs),
    /// Propagation under the band diagonal Hamiltonian
    PropagateDiagonal(RunArgs),
    /// Propagation under the effective Born-Oppenheimer Hamiltonian
    PropagateBo(RunArgs),
    /// Adiabatic error exponent along the eps ladder
    ScanAdiabatic(RunArgs),
    /// Superadiabatic projection exponents
    ScanSuperadiabatic(RunArgs),
    /// Dressing operator and dressed vacuum exponents
    ScanDressed(RunArgs),
    /// Decay probability of the upper band
    Decay(RunArgs),
    /// Transition probability by one method (decay with a single method)
    Transition(RunArgs),
    /// Brute force transition probability on the truncated dressed space
    Oracle(RunArgs),
    /// Rate formula against the Dyson integral and the oracle
    Compare(RunArgs),
    /// Fit exponents to every eps series of a results.csv
    Fit(FitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    RateFormula,
    Dyson,
    Oracle,
    FgrStatic,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::RateFormula => Method::RateFormula,
            MethodArg::Dyson => Method::Dyson,
            MethodArg::Oracle => Method::Oracle,
            MethodArg::FgrStatic => Method::FgrStatic,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config
    #[arg(long)]
    config: PathBuf,
    /// output directory (default runs/<task>-<config hash>)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// allow beta outside (5/6, 4/3] and delta below sqrt(eps)
    #[arg(long)]
    unsafe_beta: bool,
    /// comma separated eps ladder
    #[arg(long, alias = "eps-ladder", value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    delta_override: Option<f64>,
    #[arg(long)]
    with_t2: bool,
    /// superadiabatic order (1 or 2)
    #[arg(long)]
    order: Option<u32>,
    /// methods for decay, transition and compare
    #[arg(long, value_enum, value_delimiter = ',')]
    method: Option<Vec<MethodArg>>,
}

#[derive(Args)]
struct FitArgs {
    /// results.csv of an earlier run
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn apply(cfg: &mut ExperimentConfig, task: Task, a: &RunArgs) {
    cfg.task = Some(task);
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.unsafe_beta |= a.unsafe_beta;
    cfg.with_t2 |= a.with_t2;
    if let Some(e) = &a.eps {
        cfg.eps = e.clone();
    }
    if let Some(b) = a.beta {
        cfg.beta = b;
    }
    if a.delta_override.is_some() {
        cfg.delta_override = a.delta_override;
    }
    if let Some(o) = a.order {
        cfg.order = o;
    }
    if let Some(m) = &a.method {
        cfg.methods = Some(m.iter().map(|&x| x.into()).collect());
    }
}

fn execute(command: Command) -> Result<(), Error> {
    let (task, args) = match command {
        Command::Fit(f) => {
            let fits = fit_results(&f.input, &f.out)?;
            for (k, v) in fits {
                println!("{k}: exponent {:.4} r2 {:.4}", v.exponent, v.r_squared);
            }
            return Ok(());
        }
        Command::Bands(a) => (Task::Bands, a),
        Command::PropagateFull(a) => (Task::PropagateFull, a),
        Command::PropagateDiagonal(a) => (Task::PropagateDiagonal, a),
        Command::PropagateBo(a) => (Task::PropagateBo, a),
        Command::ScanAdiabatic(a) => (Task::ScanAdiabatic, a),
        Command::ScanSuperadiabatic(a) => (Task::ScanSuperadiabatic, a),
        Command::ScanDressed(a) => (Task::ScanDressed, a),
        Command::Decay(a) | Command::Transition(a) => (Task::Decay, a),
        Command::Oracle(a) => (Task::Oracle, a),
        Command::Compare(a) => (Task::Compare, a),
    };
    let mut cfg = parse_config(&args.config)?;
    apply(&mut cfg, task, &args);
    let out = args.out.clone().unwrap_or_else(|| default_out_dir(&cfg));
    let record = run(&cfg, &out).map_err(|e| {
        log::error!("{} with config {} failed", task.name(), cfg.hash());
        e
    })?;
    for (k, v) in &record.fits {
        println!("{k}: exponent {:.4} r2 {:.4}{}", v.exponent, v.r_squared, if v.degenerate { " (degenerate)" } else { "" });
    }
    for (k, v) in &record.diagnostics {
        println!("{k}: {v:e}");
    }
    println!("config {} -> {}", record.config_hash, out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
