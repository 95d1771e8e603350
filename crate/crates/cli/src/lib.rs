//! Command-line front end for the toy D³ToM engine and its cost model.

use std::fmt;
use std::io::Write;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
mod format;

pub use commands::{BenchArgs, DecodeArgs, FlopsArgs, ScheduleArgs, SweepArgs, TraceArgs};
pub use config::{ModelArgs, Preset};

/// Bad arguments or configuration. Exits with status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "d3tom", version, about = "Decider-guided token merging on a toy masked-diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Decode one synthetic prompt and print tokens and per-step merge counts.
    Decode(DecodeArgs),
    /// Analytical FLOPs for each method at each retention level, as CSV.
    Flops(FlopsArgs),
    /// Relative FLOPs over a grid of merge layers and merge ratios, as CSV.
    Sweep(SweepArgs),
    /// Wall-clock decode time per method, as CSV.
    Bench(BenchArgs),
    /// Per-step visual importance scores and kept flags, as CSV.
    Trace(TraceArgs),
}

/// Runs one parsed command, writing its primary output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Decode(a) => commands::decode(&a, out),
        Command::Flops(a) => commands::flops(&a, out),
        Command::Sweep(a) => commands::sweep(&a, out),
        Command::Bench(a) => commands::bench(&a, out),
        Command::Trace(a) => commands::trace(&a, out),
    }
}

/// Process exit status for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<UsageError>() {
        2
    } else {
        1
    }
}
