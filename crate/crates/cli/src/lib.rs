//! Command-line front end for building overlays, running the slot oracle and
//! the network simulator, sweeping scenario parameters and printing the
//! closed-form delay comparison.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

mod commands;
pub mod manifest;
pub mod sweep;

pub use manifest::RunManifest;

/// Usage or configuration problems exit with 2, validation failures with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Validation(m) => write!(f, "FAIL: {m}"),
        }
    }
}

pub(crate) fn usage(m: impl fmt::Display) -> CliError {
    CliError::Usage(m.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "snap", version, about = "Snowball multi-tree overlays: build, verify, simulate")]
pub struct Cli {
    /// Seed for every random choice; overrides the scenario's own seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Construct an overlay and print it with its validation stamp.
    Build {
        #[arg(long)]
        n: usize,
        /// auto, single-level, greedy, low-levels, or an explicit list such as 1,3
        #[arg(long, default_value = "auto")]
        policy: String,
    },
    /// Replay the push schedule slot by slot and check minimum delay.
    Oracle {
        /// Overlay JSON as written by `build`.
        overlay: PathBuf,
        /// Defaults to 4P.
        #[arg(long)]
        chunks: Option<u64>,
    },
    /// Run one scenario through the network simulator.
    Simulate {
        scenario: PathBuf,
        /// snap, pull_only or multi_opst; overrides the scenario.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Run a scenario over a parameter grid and several seeds.
    Sweep {
        scenario: PathBuf,
        /// field=start:stop:step or field=v1,v2,...
        #[arg(long)]
        vary: String,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Closed-form OPST vs snowball-tree delays.
    Analytic {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: f64,
        #[arg(long)]
        t: f64,
    },
}

pub(crate) struct Ctx {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

impl Ctx {
    pub fn log(&self, m: impl fmt::Display) {
        if self.verbose {
            eprintln!("{m}");
        }
    }

    pub fn dir(&self) -> &Path {
        self.out_dir.as_deref().unwrap_or(Path::new("."))
    }

    pub fn write(&self, name: &str, data: &[u8]) -> Result<PathBuf, CliError> {
        let dir = self.dir();
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
        let path = dir.join(name);
        std::fs::write(&path, data).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        self.log(format!("wrote {}", path.display()));
        Ok(path)
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx {
        seed: cli.seed,
        out_dir: cli.out_dir,
        verbose: cli.verbose,
    };
    match cli.command {
        Command::Build { n, policy } => commands::build(&ctx, n, &policy),
        Command::Oracle { overlay, chunks } => commands::oracle(&ctx, &overlay, chunks),
        Command::Simulate { scenario, baseline } => commands::simulate(&ctx, &scenario, baseline.as_deref()),
        Command::Sweep {
            scenario,
            vary,
            seeds,
            baseline,
        } => commands::sweep(&ctx, &scenario, &vary, seeds, baseline.as_deref()),
        Command::Analytic { n, d, t } => commands::analytic(n, d, t),
    }
}
