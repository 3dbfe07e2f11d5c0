use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use essm_harness::{configure_threads, run, Command, Format, HarnessError, RunConfig};

/// Reproduces the eSSM desk-scale experiments and writes the results as CSV or JSON.
#[derive(Debug, Parser)]
#[command(name = "essm", version)]
struct Cli {
    command: Command,
    /// Sequence length; repeat for benchmark sweeps.
    #[arg(long = "L", value_name = "n")]
    lengths: Vec<usize>,
    /// State size.
    #[arg(long = "N", value_name = "n")]
    n: Option<usize>,
    /// Input width.
    #[arg(long = "H", value_name = "n")]
    h: Option<usize>,
    /// Output width.
    #[arg(long = "M", value_name = "n")]
    m: Option<usize>,
    /// Number of block-diagonal heads.
    #[arg(long, value_name = "s", default_value_t = 1)]
    heads: usize,
    #[arg(long)]
    bidirectional: bool,
    #[arg(long, value_name = "k", default_value_t = 0)]
    seed: u64,
    /// Output file; standard output when absent.
    #[arg(long, value_name = "path")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Learning rate for train-demo.
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer steps for train-demo.
    #[arg(long)]
    steps: Option<usize>,
}

impl From<Cli> for RunConfig {
    fn from(cli: Cli) -> Self {
        RunConfig {
            command: cli.command,
            lengths: cli.lengths,
            n: cli.n,
            h: cli.h,
            m: cli.m,
            heads: cli.heads,
            bidirectional: cli.bidirectional,
            seed: cli.seed,
            output_path: cli.out,
            format: cli.format,
            learning_rate: cli.lr,
            steps: cli.steps,
        }
    }
}

fn execute(cfg: &RunConfig) -> Result<bool, HarnessError> {
    configure_threads()?;
    let report = run(cfg)?;
    match &cfg.output_path {
        Some(path) => report.write(cfg.format, BufWriter::new(File::create(path)?))?,
        None => report.write(cfg.format, io::stdout().lock())?,
    }
    for check in &report.checks {
        eprintln!("{check}");
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = RunConfig::from(cli);
    match execute(&cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}: assertion failed", cfg.command);
            ExitCode::from(2)
        }
        Err(e @ (HarnessError::Usage(_) | HarnessError::Io(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{}: {e}", cfg.command);
            ExitCode::from(2)
        }
    }
}
