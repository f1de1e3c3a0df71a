use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use fa3sim::analytical::{force_ideal, regime_select, HardwareParams, Regime, WorkloadParams};
use fa3sim::config::{ConfigError, SimConfig, SliceHash};
use fa3sim::gantt;
use fa3sim::isa::{parse_trace, serialize_trace, ParseError};
use fa3sim::sim::{run_to_completion, SimError, SimResult};
use fa3sim::tracegen::eventlog::{emit_event_log, translate_event_log, EventLog, EventLogError};
use fa3sim::tracegen::{gen_fa3_trace, Fa3Workload};

use crate::{Command, GanttFormat, HwArgs};

/// Failure classes mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Deadlock(String),
    Validation(String),
    Other(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Deadlock(_) => 3,
            CliError::Validation(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Deadlock(m) => write!(f, "{m}"),
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EventLogError> for CliError {
    fn from(e: EventLogError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => c.into(),
            SimError::Deadlock(_) => CliError::Deadlock(e.to_string()),
            SimError::Validation(ref diags) => {
                let all: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
                CliError::Validation(all.join("\n"))
            }
            SimError::Isa { .. } => CliError::Validation(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Written next to every output so a run can be reproduced.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    inputs: Vec<PathBuf>,
    hardware_config: Option<&'a Path>,
    output_dir: &'a Path,
    flags: &'a HwArgs,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a SimConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    workload: Option<&'a Fa3Workload>,
}

/// Writes to stdout; a reader that went away early (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(anyhow::Error::from(e).context("writing stdout").into()),
        _ => Ok(()),
    }
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    Ok(fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?)
}

fn create_dir(dir: &Path) -> Result<()> {
    Ok(fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).context("serializing manifest")?;
    write(&dir.join("manifest.json"), json + "\n")
}

fn load_workload(path: &Path) -> Result<Fa3Workload> {
    Ok(Fa3Workload::from_kv_text(&read_text(path)?)?)
}

/// Hardware file (or defaults) with the command-line switches applied.
fn load_config(hw: &HwArgs) -> Result<SimConfig> {
    let mut cfg = match &hw.hw {
        Some(path) => SimConfig::from_kv_text(&read_text(path)?)?,
        None => SimConfig::default(),
    };
    if hw.no_lrc {
        cfg.lrc_enabled = false;
    }
    if hw.naive_slice_hash {
        cfg.slice_hash = SliceHash::Naive;
    }
    if hw.no_remotecopy {
        cfg.remotecopy_enabled = false;
    }
    if hw.no_tma_dedup {
        cfg.tma_dedup = false;
    }
    if let Some(b) = hw.l2_bytes {
        cfg.l2_total_bytes = b;
    }
    if let Some(m) = hw.mshr {
        cfg.llc_mshr_per_slice = m;
    }
    if let Some(c) = hw.flat_tma_setup {
        cfg.tma_flat_setup = Some(c);
    }
    if let Some(s) = hw.seed {
        cfg.seed = s;
    }
    cfg.check()?;
    Ok(cfg)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenTrace { workload, out, event_log } => gen_trace(&workload, &out, event_log),
        Command::Translate { event_log, workload, out } => translate(&event_log, &workload, &out),
        Command::Simulate { trace, hw, out } => simulate(&trace, &hw, &out),
        Command::Analyze { workload, hw, force_ideal, l2_effective_bytes } => {
            analyze(&workload, &hw, force_ideal, l2_effective_bytes)
        }
        Command::Compare { workload, hw, points, ls, out } => {
            let mut points = points;
            points.extend(ls.iter().map(|&n| (n, n)));
            compare(&workload, &hw, &points, out.as_deref())
        }
        Command::Gantt { result, sm, blocks, format, out } => export_gantt(&result, sm, &blocks, format, out.as_deref()),
    }
}

fn gen_trace(workload_path: &Path, out: &Path, event_log: bool) -> Result<()> {
    let w = load_workload(workload_path)?;
    w.check()?;
    let program = gen_fa3_trace(&w);
    create_dir(out)?;
    write(&out.join("trace.txt"), serialize_trace(&program))?;
    if event_log {
        write(&out.join("events.bin"), emit_event_log(&w)?.to_bytes())?;
    }
    let flags = HwArgs::default();
    write_manifest(
        out,
        &RunManifest {
            command: "gen-trace",
            inputs: vec![workload_path.to_path_buf()],
            hardware_config: None,
            output_dir: out,
            flags: &flags,
            seed: SimConfig::default().seed,
            config: None,
            workload: Some(&w),
        },
    )?;
    emit(&format!("{} blocks, {} instructions -> {}\n", program.blocks.len(), program.instruction_count(), out.join("trace.txt").display()))
}

fn translate(log_path: &Path, workload_path: &Path, out: &Path) -> Result<()> {
    let w = load_workload(workload_path)?;
    w.check()?;
    let bytes = fs::read(log_path).with_context(|| format!("reading {}", log_path.display()))?;
    let t = translate_event_log(&EventLog::from_bytes(&bytes)?, &w)?;
    for warning in &t.warnings {
        eprintln!("warning: {warning}");
    }
    create_dir(out)?;
    write(&out.join("trace.txt"), serialize_trace(&t.program))?;
    let flags = HwArgs::default();
    write_manifest(
        out,
        &RunManifest {
            command: "translate",
            inputs: vec![log_path.to_path_buf(), workload_path.to_path_buf()],
            hardware_config: None,
            output_dir: out,
            flags: &flags,
            seed: SimConfig::default().seed,
            config: None,
            workload: Some(&w),
        },
    )?;
    emit(&format!("{t} -> {}\n", out.join("trace.txt").display()))
}

fn simulate(trace_path: &Path, hw: &HwArgs, out: &Path) -> Result<()> {
    let program = parse_trace(&read_text(trace_path)?)?;
    let cfg = load_config(hw)?;
    let result = run_to_completion(&program, &cfg)?;
    create_dir(out)?;
    write(&out.join("result.json"), result.to_json() + "\n")?;
    write_manifest(
        out,
        &RunManifest {
            command: "simulate",
            inputs: vec![trace_path.to_path_buf()],
            hardware_config: hw.hw.as_deref(),
            output_dir: out,
            flags: hw,
            seed: cfg.seed,
            config: Some(&cfg),
            workload: None,
        },
    )?;
    emit(&format!(
        "{} cycles ({:.3} us), L2 {} B requested, DRAM {} B\n",
        result.total_cycles,
        result.latency_us,
        result.traffic.l2_requested_bytes(),
        result.traffic.dram_bytes()
    ))
}

fn analyze(workload_path: &Path, hw: &HwArgs, forced: bool, l2_effective: Option<u64>) -> Result<()> {
    let w = WorkloadParams::from(&load_workload(workload_path)?);
    w.check()?;
    let cfg = load_config(hw)?;
    let mut params = HardwareParams::from_sim_config(&cfg);
    if let Some(b) = l2_effective {
        params.l2_effective_bytes = b;
    }
    let report = if forced { force_ideal(&w, &params) } else { regime_select(&w, &params) };
    let json = serde_json::to_string_pretty(&report).context("serializing report")?;
    emit(&(json + "\n"))
}

pub const COMPARE_HEADER: &str = "L,S,regime,model_l2,sim_l2,model_dram,sim_dram,rel_err,dram_rel_err,error";

fn compare(workload_path: &Path, hw: &HwArgs, points: &[(u64, u64)], out: Option<&Path>) -> Result<()> {
    let base = load_workload(workload_path)?;
    let cfg = SimConfig { record_gantt: false, ..load_config(hw)? };
    let params = HardwareParams::from_sim_config(&cfg);
    let rows: Vec<String> = points
        .par_iter()
        .map(|&(l, s)| {
            let w = Fa3Workload { l, s, ..base.clone() };
            let report = regime_select(&WorkloadParams::from(&w), &params);
            let regime = match report.regime {
                Regime::Ideal => "ideal",
                Regime::Realistic => "realistic",
            };
            let prefix = format!("{l},{s},{regime},{},", report.l2_bytes);
            let sim = w.check().map_err(|e| e.to_string()).and_then(|_| {
                run_to_completion(&gen_fa3_trace(&w), &cfg).map_err(|e| e.to_string())
            });
            match sim {
                Ok(r) => {
                    let sim_l2 = r.traffic.l2_requested_bytes();
                    let sim_dram = r.traffic.dram_bytes();
                    let err = |sim: u64, model: u128| (sim as f64 - model as f64).abs() / model as f64;
                    format!(
                        "{prefix}{sim_l2},{},{sim_dram},{:.6},{:.6},",
                        report.dram_bytes,
                        err(sim_l2, report.l2_bytes),
                        err(sim_dram, report.dram_bytes)
                    )
                }
                Err(e) => format!("{prefix},{},,,,{}", report.dram_bytes, csv_field(&e)),
            }
        })
        .collect();
    let mut csv = String::from(COMPARE_HEADER);
    csv.push('\n');
    for row in rows {
        csv.push_str(&row);
        csv.push('\n');
    }
    match out {
        Some(path) => write(path, csv),
        None => emit(&csv),
    }
}

fn csv_field(s: &str) -> String {
    format!("\"{}\"", s.lines().next().unwrap_or("").replace('"', "'"))
}

fn export_gantt(result_path: &Path, sm: Option<u32>, blocks: &[u32], format: GanttFormat, out: Option<&Path>) -> Result<()> {
    let result: SimResult = serde_json::from_str(&read_text(result_path)?)
        .map_err(|e| CliError::Validation(format!("{}: {e}", result_path.display())))?;
    let entries = gantt::filter(&result.gantt, sm, blocks);
    let text = match format {
        GanttFormat::Csv => gantt::to_csv(&entries),
        GanttFormat::Json => serde_json::to_string_pretty(&entries).context("serializing intervals")? + "\n",
    };
    match out {
        Some(path) => write(path, text),
        None => emit(&text),
    }
}
