use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use sbarrier_core::cli::{run, CliError, Command, Outcome, RunOptions, EXIT_INVALID};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Verify,
    Synthesize,
    Simulate,
    Check,
}

/// Finite-time safety certificates and controller synthesis for polynomial SDEs.
#[derive(Debug, Parser)]
#[command(name = "sbarrier", version)]
struct Args {
    command: Cmd,
    /// TOML problem description.
    config: PathBuf,
    /// Directory for result documents.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Monte Carlo seed (overrides mc.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Also compute the α = 0 bound at the same degree (verify).
    #[arg(long)]
    compare_alpha_zero: bool,
    /// Result document of `synthesize` whose controllers `simulate` uses.
    #[arg(long)]
    controller: Option<PathBuf>,
    /// Result document of `verify` or `synthesize` (`check` input; bound column of `simulate`).
    #[arg(long)]
    certificate: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn execute(args: &Args) -> Result<Outcome, CliError> {
    let command = match args.command {
        Cmd::Verify => Command::Verify,
        Cmd::Synthesize => Command::Synthesize,
        Cmd::Simulate => Command::Simulate,
        Cmd::Check => Command::Check,
    };
    let config = read(&args.config)?;
    let opts = RunOptions {
        seed: args.seed,
        compare_alpha_zero: args.compare_alpha_zero,
        controller: args.controller.as_deref().map(read).transpose()?,
        certificate: args.certificate.as_deref().map(read).transpose()?,
    };
    run(command, &config, &opts)
}

fn write_files(out: &Path, files: &[(String, String)]) -> std::io::Result<()> {
    std::fs::create_dir_all(out)?;
    for (name, contents) in files {
        std::fs::write(out.join(name), contents)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_INVALID as u8);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let (code, files) = match execute(&args) {
        Ok(o) => (o.code, o.files),
        Err(e) => (e.code, vec![("error.json".to_string(), e.document())]),
    };
    if let Some((_, doc)) = files.iter().find(|(n, _)| n == "error.json") {
        eprint!("{doc}");
    }
    if let Err(e) = write_files(&args.out, &files) {
        eprintln!("cannot write results to {}: {e}", args.out.display());
        return ExitCode::from(EXIT_INVALID as u8);
    }
    for (name, _) in &files {
        println!("{}", args.out.join(name).display());
    }
    ExitCode::from(code as u8)
}
