//! Experiment harness for the `essm` crate.
//!
//! Every command builds a [`Report`]: a flat table of records plus the named
//! checks the command asserts. The binary renders the table as CSV or JSON and
//! turns failed checks into exit code 2.

pub mod bench;
pub mod report;
pub mod suite;
pub mod toy;

use std::fmt;
use std::path::PathBuf;

pub use report::{Cell, Check, Format, Report, Table};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] essm::EssmError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    ToyEquivalence,
    Convergence,
    OracleSweep,
    Bench,
    Params,
    TrainDemo,
    Gradcheck,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Command::ToyEquivalence => "toy-equivalence",
            Command::Convergence => "convergence",
            Command::OracleSweep => "oracle-sweep",
            Command::Bench => "bench",
            Command::Params => "params",
            Command::TrainDemo => "train-demo",
            Command::Gradcheck => "gradcheck",
        };
        f.write_str(name)
    }
}

/// Parsed invocation. Unset sizes fall back to per-command defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub lengths: Vec<usize>,
    pub n: Option<usize>,
    pub h: Option<usize>,
    pub m: Option<usize>,
    pub heads: usize,
    pub bidirectional: bool,
    pub seed: u64,
    pub output_path: Option<PathBuf>,
    pub format: Format,
    pub learning_rate: Option<f64>,
    pub steps: Option<usize>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            lengths: Vec::new(),
            n: None,
            h: None,
            m: None,
            heads: 1,
            bidirectional: false,
            seed: 0,
            output_path: None,
            format: Format::Csv,
            learning_rate: None,
            steps: None,
        }
    }

    /// Resolved `(N, H, M)` with the given fallbacks; `M` defaults to `H`.
    pub fn sizes_or(&self, n: usize, h: usize) -> (usize, usize, usize) {
        let n = self.n.unwrap_or(n);
        let h = self.h.unwrap_or(h);
        (n, h, self.m.unwrap_or(h))
    }

    pub fn validate(&self) -> Result<()> {
        let given = [
            ("L", self.lengths.iter().copied().min()),
            ("N", self.n),
            ("H", self.h),
            ("M", self.m),
        ];
        for (name, v) in given {
            if v == Some(0) {
                return Err(HarnessError::Usage(format!("--{name} must be positive")));
            }
        }
        if self.heads == 0 {
            return Err(HarnessError::Usage("--heads must be positive".into()));
        }
        if let Some(lr) = self.learning_rate {
            if !lr.is_finite() || lr < 0.0 {
                return Err(HarnessError::Usage(format!(
                    "--lr must be a finite non-negative number, got {lr}"
                )));
            }
        }
        Ok(())
    }
}

/// Runs one command and returns its report. Check failures are recorded in
/// the report, not returned as errors.
pub fn run(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    match cfg.command {
        Command::ToyEquivalence => toy::run_toy_equivalence(cfg),
        Command::Convergence => toy::run_convergence(cfg),
        Command::OracleSweep => suite::run_oracle_sweep(cfg),
        Command::Bench => bench::run_bench(cfg),
        Command::Params => suite::run_params(cfg),
        Command::TrainDemo => suite::run_train_demo(cfg),
        Command::Gradcheck => suite::run_gradcheck(cfg),
    }
}

/// Applies `ESSM_THREADS` to the global rayon pool. Call once, before any
/// parallel work.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var("ESSM_THREADS") else {
        return Ok(None);
    };
    let threads: usize = raw.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| {
        HarnessError::Usage(format!(
            "ESSM_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| HarnessError::Usage(format!("cannot size thread pool: {e}")))?;
    Ok(Some(threads))
}
