//! `semsplat`: generate synthetic bundles, run the SLAM pipeline, evaluate
//! results and compare the ablation settings.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "semsplat", version, about = "Semantic Gaussian-splatting RGB-D SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sequence bundle.
    Generate {
        /// Synthetic scene settings (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track and map a bundle; writes trajectory.txt, report.json and renders/.
    Run {
        #[arg(long)]
        bundle: PathBuf,
        /// Pipeline settings (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Skip writing the final renders.
        #[arg(long)]
        no_renders: bool,
    },
    /// Score a run directory against its bundle; writes metrics.json.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        result: PathBuf,
    },
    /// Run the no-seg, seg and seg+consistency settings and tabulate them.
    Ablate {
        #[arg(long)]
        bundle: PathBuf,
        /// Base pipeline settings (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit code for a failed command: inputs at fault map to the data code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<semsplat::Error>() {
            return if e.is_data_error() { EXIT_DATA } else { EXIT_RUNTIME };
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return EXIT_USAGE;
        }
    }
    EXIT_RUNTIME
}

/// The error chain on one line, skipping causes their parent already quotes.
fn one_line(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string().replace('\n', " ");
        if parts.last().is_some_and(|p| p.contains(&text)) {
            continue;
        }
        parts.push(text);
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = commands::init_threads().and_then(|()| match cli.command {
        Command::Generate { config, out } => commands::generate(config.as_deref(), &out),
        Command::Run {
            bundle,
            config,
            out,
            no_renders,
        } => commands::run(&bundle, config.as_deref(), &out, !no_renders),
        Command::Eval { bundle, result } => commands::eval(&bundle, &result),
        Command::Ablate { bundle, config, out } => commands::ablate(&bundle, config.as_deref(), &out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error[{code}]: {}", one_line(&e));
            ExitCode::from(code)
        }
    }
}
