mod commands;
mod demo;
mod inputs;
mod report;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use binattn::Error;

use crate::report::Report;

#[derive(Parser, Debug)]
#[command(
    name = "binattn",
    version,
    about = "Binary query/key attention: checks, reports and benchmarks"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Random seed for generated inputs.
    #[arg(long, global = true, env = "BINATTN_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Write the report as CSV (a directory for `demo`).
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,

    /// Report a tolerance failure regardless of the results.
    #[arg(long, global = true, hide = true)]
    pub force_fail: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the invariant suite on small seeded instances.
    Selftest,
    /// Compare Monte Carlo sign covariance with the arcsine law.
    #[command(name = "verify-theorem1")]
    VerifyTheorem1(commands::TheoremArgs),
    /// Compare reference and binary attention maps on Gaussian inputs.
    Fidelity(commands::FidelityArgs),
    /// Time the GEMM or attention kernels.
    Bench(commands::BenchArgs),
    /// Write both attention maps as CSV, PGM and tensor files.
    Demo(demo::DemoArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasKind {
    None,
    Dense,
    Rel1d,
    Rel2d,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn configure_threads(requested: Option<usize>, default: usize) -> Result<(), Error> {
    let threads = requested.unwrap_or(default);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<Report, Error> {
    let g = &cli.global;
    // selftest defaults to one thread so its output never depends on the host
    let default_threads = match cli.command {
        Command::Selftest => 1,
        _ => 0,
    };
    configure_threads(g.threads, default_threads)?;
    match &cli.command {
        Command::Selftest => selftest::run(g.seed),
        Command::VerifyTheorem1(args) => commands::verify_theorem1(args, g.seed),
        Command::Fidelity(args) => commands::fidelity(args, g.seed),
        Command::Bench(args) => commands::bench(args, g.seed),
        Command::Demo(args) => demo::run(args, g),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Explicit --help/--version succeed; a bare invocation prints help as a usage error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            return ExitCode::from(code);
        }
    };
    let output = cli.global.output.clone();
    let force_fail = cli.global.force_fail;
    let is_demo = matches!(cli.command, Command::Demo(_));

    let mut report = match run(cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for(&e));
        }
    };
    if force_fail {
        report.check("injected failure", "--force-fail", false);
    }
    print!("{}", report.render());
    if let (Some(path), false) = (output, is_demo) {
        if let Err(e) = std::fs::write(&path, report.csv()) {
            eprintln!("error: writing {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
