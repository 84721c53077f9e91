use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use obsv_cli::{run, CliError, Command, RunOptions, ScenarioConfig, Status};

#[derive(Parser)]
#[command(
    name = "obsv",
    version,
    about = "State reconstruction and hybrid observers for triangular systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the plant and write truth.csv.
    Simulate(CommonArgs),
    /// Check observability, excitation and contraction at t_hi.
    Check(CommonArgs),
    /// Estimate x(t0) and write estimates.csv.
    Estimate(CommonArgs),
    /// Run the reset observer and write observer.csv and resets.json.
    Observe(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; defaults to the scenario's `outputs` or out/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fail when the global Lipschitz bound cannot be verified.
    #[arg(long)]
    strict: bool,
    /// Record wall-clock phase timings in summary.json.
    #[arg(long)]
    timings: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OBSV_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Check(a) => (Command::Check, a),
        Cmd::Estimate(a) => (Command::Estimate, a),
        Cmd::Observe(a) => (Command::Observe, a),
    };
    match execute(command, &args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("obsv {}: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command, args: &CommonArgs) -> Result<i32, CliError> {
    let cfg = ScenarioConfig::load(&args.scenario)?;
    let opts = RunOptions {
        seed: args.seed,
        strict: args.strict,
        timings: args.timings,
    };
    let report = run(command, &cfg, &opts)?;
    let dir = cfg.output_dir(args.out.as_deref());
    for path in report.write(&dir)? {
        log::info!("wrote {}", path.display());
    }
    match &report.status {
        Status::Ok => {}
        Status::Numerical(m) | Status::Verdict(m) => eprintln!("obsv {}: {m}", command.name()),
    }
    if command == Command::Check {
        println!(
            "{}",
            obsv_cli::summary::to_json(&report.summary.verdicts).trim_end()
        );
    }
    Ok(report.exit_code())
}
