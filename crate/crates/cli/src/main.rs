use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fluxsense_cli::{
    cmd_analyze, cmd_pattern, cmd_sense, cmd_verify, CmdError, ExperimentSpec, Overrides,
    SenseOptions,
};

#[derive(Parser)]
#[command(name = "fluxsense", version, about = "Qubit flux-sensing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment description (JSON).
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset: paper-fig4, desk, qec, fig3, fig2b.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "INT")]
    workers: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write calibration patterns over (flux x delay).
    Pattern(Common),
    /// Check the density-matrix engine against the closed form.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Error added to the first entangler rotation (negative control).
        #[arg(long, allow_hyphen_values = true)]
        angle_error: Option<f64>,
    },
    /// Run the phase-estimation sweep with checkpointing.
    Sense {
        #[command(flatten)]
        common: Common,
        /// Stop after this many finished runs, as if interrupted.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Summarise the record files in a directory.
    Analyze {
        /// Directory holding record files (defaults to --out, then `out`).
        dir: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentSpec, CmdError> {
    let spec = match (&common.config, &common.preset) {
        (Some(path), _) => ExperimentSpec::load(path)?,
        (None, Some(name)) => ExperimentSpec::preset(name)?,
        (None, None) => {
            return Err(CmdError::Validation(
                "give --config PATH or --preset NAME".into(),
            ))
        }
    };
    spec.with_overrides(&Overrides {
        seed: common.seed,
        workers: common.workers,
        output: common.out.clone(),
    })
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Pattern(common) => {
            for path in cmd_pattern(&load(&common)?)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Verify {
            common,
            angle_error,
        } => {
            let mut spec = load(&common)?;
            if let Some(e) = angle_error {
                spec.verify.angle_error = e;
            }
            let report = cmd_verify(&spec)?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(CmdError::Verification("verification failed".into()));
            }
        }
        Command::Sense { common, stop_after } => {
            let spec = load(&common)?;
            for path in cmd_sense(&spec, &SenseOptions { stop_after })? {
                println!("wrote {}", path.display());
            }
        }
        Command::Analyze { dir, out } => {
            let dir = dir.or(out).unwrap_or_else(|| PathBuf::from("out"));
            for path in cmd_analyze(&dir)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation failures
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
