mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Cycle-level simulator and traffic model for warp-specialized attention
/// kernels.
#[derive(Parser, Debug)]
#[command(name = "fa3sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a trace from a workload config.
    GenTrace {
        workload: PathBuf,
        /// Output directory for trace.txt and manifest.json.
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the equivalent binary event log as events.bin.
        #[arg(long)]
        event_log: bool,
    },
    /// Rebuild a trace from a binary event log.
    Translate {
        event_log: PathBuf,
        workload: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Simulate a trace and write result.json.
    Simulate {
        trace: PathBuf,
        #[command(flatten)]
        hw: HwArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print the analytical traffic report for a workload as JSON.
    Analyze {
        workload: PathBuf,
        #[command(flatten)]
        hw: HwArgs,
        /// Use the ideal-cache DRAM estimate regardless of L2 capacity.
        #[arg(long)]
        force_ideal: bool,
        /// Override the effective L2 capacity used by the regime test.
        #[arg(long, value_parser = parse_bytes)]
        l2_effective_bytes: Option<u64>,
    },
    /// Compare model and simulator traffic over a sweep of (L, S) points.
    Compare {
        workload: PathBuf,
        #[command(flatten)]
        hw: HwArgs,
        /// Sweep point `L:S`; repeatable.
        #[arg(long = "point", value_parser = parse_point)]
        points: Vec<(u64, u64)>,
        /// Sweep point with L = S; repeatable.
        #[arg(long = "ls")]
        ls: Vec<u64>,
        /// CSV destination; stdout if absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Export engine busy intervals from a result.json.
    Gantt {
        result: PathBuf,
        #[arg(long)]
        sm: Option<u32>,
        /// Comma-separated block ids.
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<u32>,
        #[arg(long, value_enum, default_value_t = GanttFormat::Json)]
        format: GanttFormat,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum GanttFormat {
    Json,
    Csv,
}

/// Hardware config file plus ablation switches layered on top of it.
#[derive(Args, Debug, Clone, Default, serde::Serialize)]
struct HwArgs {
    /// Hardware config (`key = value`); built-in defaults if absent.
    #[arg(long)]
    hw: Option<PathBuf>,
    /// Disable the per-TPC request coalescer.
    #[arg(long)]
    no_lrc: bool,
    /// Map lines to slices by plain modulo instead of the XOR hash.
    #[arg(long)]
    naive_slice_hash: bool,
    /// Disable cross-partition shadow copies.
    #[arg(long)]
    no_remotecopy: bool,
    #[arg(long, value_parser = parse_bytes)]
    l2_bytes: Option<u64>,
    /// MSHR entries per L2 slice.
    #[arg(long)]
    mshr: Option<u32>,
    /// Issue one request per element instead of per distinct line.
    #[arg(long)]
    no_tma_dedup: bool,
    /// Replace the TMA setup latency with a single constant.
    #[arg(long)]
    flat_tma_setup: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_bytes(s: &str) -> Result<u64, String> {
    fa3sim::config::parse_int(s).ok_or_else(|| format!("not a byte count: {s}"))
}

fn parse_point(s: &str) -> Result<(u64, u64), String> {
    let (l, r) = s.split_once(':').ok_or_else(|| format!("expected L:S, got {s}"))?;
    Ok((parse_bytes(l)?, parse_bytes(r)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
