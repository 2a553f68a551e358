//! Command-line front end. Exit codes: 0 ok, 2 parse, 3 validation,
//! 4 I/O, 5 runtime.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::capture::{read_pcap, segment_stream, write_pcap, CaptureWindow, LINKTYPE_RAW};
use crate::emit::{emit_bundle, load_bundle, render_bundle, EmitError};
use crate::ingest::{extract_descriptor, parse_phys_config, DescriptorDefaults, ExtractError};
use crate::metrics::state_consistency_index;
use crate::model::{
    descriptor_from_json, descriptor_to_json, validate_descriptor, DescriptorError, Micros,
    TwinDescriptor, MICROS_PER_SEC,
};
use crate::replay::ReplayPlan;
use crate::run::{run, write_outputs, write_partial, RunConfig, RunError};
use crate::sim::{generate, ScenarioKind, ScenarioSpec, SimError};
use crate::transport::{encode_window, manifest_file_name, ChannelKind, ChannelSpec, TransportError};

pub const SEED_ENV: &str = "TWINSYNC_SEED";
pub const DEFAULT_SEED: u64 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl fmt::Display) -> Self {
        CliError {
            code,
            message: message.to_string(),
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

/// Reads an input file; a missing or unreadable input is a parse failure.
fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::new(EXIT_PARSE, format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn seconds_to_us(s: f64, what: &str) -> Result<Micros, CliError> {
    if !(s.is_finite() && s > 0.0) {
        return Err(CliError::new(EXIT_VALIDATION, format!("{what} must be a positive number of seconds")));
    }
    Ok((s * MICROS_PER_SEC as f64).round() as Micros)
}

#[derive(Debug, Parser)]
#[command(name = "twinsync", version, about = "Windowed capture, transfer and replay between a physical network and its digital twin")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a physical configuration file into a descriptor JSON.
    Ingest(IngestArgs),
    /// Write SMF/NSSF/AMF documents and a topology blueprint.
    Emit(EmitArgs),
    /// Generate a scenario trace as a pcap file.
    Simulate(SimulateArgs),
    /// Split a pcap into fixed windows with manifests.
    Segment(SegmentArgs),
    /// Run the full sync loop and write a fidelity report.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub phys_config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub network_name: Option<String>,
    #[arg(long)]
    pub plmn: Option<String>,
    #[arg(long)]
    pub ue_count: Option<u32>,
    #[arg(long)]
    pub capture_interface: Option<String>,
    #[arg(long)]
    pub window_seconds: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EmitArgs {
    #[arg(long)]
    pub descriptor: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: ScenarioKind,
    #[arg(long, default_value_t = 60.0)]
    pub duration: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    pub ue_count: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub window_seconds: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Window origin in microseconds; defaults to the first packet's second.
    #[arg(long)]
    pub origin_us: Option<Micros>,
    #[arg(long, default_value = crate::model::DEFAULT_CAPTURE_INTERFACE)]
    pub interface: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ChannelArg {
    InProcess,
    Directory,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Virtual,
    RealTime,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub descriptor: PathBuf,
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: ScenarioKind,
    #[arg(long, value_enum, default_value = "in-process")]
    pub channel: ChannelArg,
    #[arg(long, value_enum, default_value = "virtual")]
    pub mode: ModeArg,
    /// Real-time speed-up factor.
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,
    /// Scenario length in seconds.
    #[arg(long, default_value_t = 60.0)]
    pub duration: f64,
    /// Report JSON path; CSV outputs are written next to it.
    #[arg(long)]
    pub report: PathBuf,
    /// Overrides the descriptor's window length.
    #[arg(long)]
    pub window_seconds: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ue_count: Option<u32>,
    #[arg(long, default_value_t = 0.0)]
    pub latency_ms: f64,
    #[arg(long, default_value_t = 1_000_000_000)]
    pub bandwidth_bps: u64,
    #[arg(long, default_value_t = 0.0)]
    pub loss: f64,
    #[arg(long, default_value_t = 1.0)]
    pub bin_seconds: f64,
    #[arg(long, default_value_t = 10)]
    pub max_lag_bins: usize,
    /// Exchange directory and replayed pcaps; defaults to the report's directory.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    /// Keep one pcap per replayed window.
    #[arg(long)]
    pub keep_pcaps: bool,
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse()
}

/// Seed from the environment if set, else the flag, else the default.
fn resolve_seed(flag: Option<u64>) -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::new(EXIT_PARSE, format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag.unwrap_or(DEFAULT_SEED)),
    }
}

fn load_descriptor(path: &Path) -> Result<TwinDescriptor, CliError> {
    let bytes = read_input(path)?;
    let d = descriptor_from_json(&bytes).map_err(|e| {
        let code = match e {
            DescriptorError::Invalid(_) => EXIT_VALIDATION,
            _ => EXIT_PARSE,
        };
        CliError::new(code, format!("{}: {e}", path.display()))
    })?;
    let violations = validate_descriptor(&d);
    if !violations.is_empty() {
        return Err(CliError::new(
            EXIT_VALIDATION,
            format!("{}: {}", path.display(), DescriptorError::Invalid(violations)),
        ));
    }
    Ok(d)
}

fn cmd_ingest(a: &IngestArgs, out: &mut dyn io::Write, err: &mut dyn io::Write) -> Result<(), CliError> {
    let bytes = read_input(&a.phys_config)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::new(EXIT_PARSE, format!("{}: not UTF-8 text", a.phys_config.display())))?;
    let doc = parse_phys_config(&text).map_err(|e| {
        CliError::new(
            EXIT_PARSE,
            format!("{}:{}:{}: {e}", a.phys_config.display(), e.line, e.column),
        )
    })?;
    let defaults = DescriptorDefaults {
        network_name: a.network_name.clone(),
        plmn: a.plmn.clone(),
        ue_count: a.ue_count,
        capture_interface: a.capture_interface.clone(),
        window_us: a.window_seconds.map(|s| seconds_to_us(s, "--window-seconds")).transpose()?,
        ..Default::default()
    };
    let extraction = extract_descriptor(&doc, &defaults).map_err(|e| {
        let code = match e {
            ExtractError::Invalid(_) => EXIT_VALIDATION,
            _ => EXIT_PARSE,
        };
        CliError::new(code, format!("{}: {e}", a.phys_config.display()))
    })?;
    for w in &extraction.warnings {
        let _ = writeln!(err, "warning: {}: {w}", a.phys_config.display());
    }
    let json = descriptor_to_json(&extraction.descriptor).map_err(|e| CliError::new(EXIT_VALIDATION, e))?;
    write_output(&a.out, &json)?;
    let _ = writeln!(
        out,
        "wrote {} ({} slices)",
        a.out.display(),
        extraction.descriptor.slices.len()
    );
    Ok(())
}

fn cmd_emit(a: &EmitArgs, out: &mut dyn io::Write) -> Result<(), CliError> {
    let d = load_descriptor(&a.descriptor)?;
    let emit_err = |e: EmitError| match e {
        EmitError::Io { path, source } => CliError::io(&path, source),
        other => CliError::new(EXIT_RUNTIME, other),
    };
    let files = render_bundle(&emit_bundle(&d), &a.out_dir).map_err(emit_err)?;
    let reloaded = load_bundle(&a.out_dir).map_err(emit_err)?;
    for f in &files {
        let _ = writeln!(out, "wrote {}", f.display());
    }
    let _ = writeln!(out, "state consistency index: {}", state_consistency_index(&d, &reloaded));
    Ok(())
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::InvalidSpec(_) => CliError::new(EXIT_VALIDATION, e),
        SimError::ClockRegression { .. } => CliError::new(EXIT_RUNTIME, e),
    }
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn io::Write) -> Result<(), CliError> {
    let mut spec = ScenarioSpec::new(a.scenario, seconds_to_us(a.duration, "--duration")?, resolve_seed(a.seed)?);
    spec.ue_count = a.ue_count;
    let trace = generate(&spec).map_err(sim_error)?;
    let pcap = write_pcap(LINKTYPE_RAW, &trace.packets).map_err(|e| CliError::new(EXIT_RUNTIME, e))?;
    write_output(&a.out, &pcap)?;
    let _ = writeln!(
        out,
        "wrote {} ({} packets, seed {})",
        a.out.display(),
        trace.packets.len(),
        trace.seed
    );
    Ok(())
}

fn cmd_segment(a: &SegmentArgs, out: &mut dyn io::Write) -> Result<(), CliError> {
    let bytes = read_input(&a.input)?;
    let (_, packets) =
        read_pcap(&bytes).map_err(|e| CliError::new(EXIT_PARSE, format!("{}: {e}", a.input.display())))?;
    let window_us = seconds_to_us(a.window_seconds, "--window-seconds")?;
    let origin = a
        .origin_us
        .or_else(|| packets.first().map(|p| p.ts_micros / MICROS_PER_SEC * MICROS_PER_SEC))
        .unwrap_or(0);
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let windows = segment_stream(packets, window_us, origin, None, a.interface.clone())
        .map_err(|e| CliError::new(EXIT_VALIDATION, e))?;
    let mut count = 0;
    for w in windows {
        let w = w.map_err(|e| CliError::new(EXIT_VALIDATION, format!("{}: {e}", a.input.display())))?;
        let frame = encode_window(&w).map_err(|e| CliError::new(EXIT_RUNTIME, e))?;
        let manifest = serde_json::to_vec_pretty(&frame.manifest).expect("manifest serializes");
        write_output(&a.out_dir.join(CaptureWindow::file_name(w.seq)), &frame.pcap)?;
        write_output(&a.out_dir.join(manifest_file_name(w.seq)), &manifest)?;
        count += 1;
    }
    let _ = writeln!(out, "wrote {count} windows to {}", a.out_dir.display());
    Ok(())
}

fn run_error_code(e: &RunError) -> i32 {
    match e {
        RunError::Config(_) | RunError::Simulate(SimError::InvalidSpec(_)) => EXIT_VALIDATION,
        RunError::Transport(TransportError::InvalidSpec(_)) => EXIT_VALIDATION,
        RunError::Replay(crate::replay::ReplayError::InvalidPlan(_)) => EXIT_VALIDATION,
        RunError::Io { .. } | RunError::Transport(TransportError::Io { .. }) => EXIT_IO,
        RunError::Replay(crate::replay::ReplayError::Sink(crate::replay::SinkError::Io { .. })) => EXIT_IO,
        _ => EXIT_RUNTIME,
    }
}

pub fn build_run_config(a: &RunArgs) -> Result<RunConfig, CliError> {
    let d = load_descriptor(&a.descriptor)?;
    let seed = resolve_seed(a.seed)?;
    let mut scenario = ScenarioSpec::new(a.scenario, seconds_to_us(a.duration, "--duration")?, seed);
    scenario.ue_count = match a.ue_count {
        Some(n) if n > d.ue_count => {
            return Err(CliError::new(
                EXIT_VALIDATION,
                format!("--ue-count {n} exceeds the descriptor's {} UEs", d.ue_count),
            ))
        }
        Some(n) => n,
        None => d.ue_count,
    };
    if let Some(s) = d.slices.first() {
        scenario.params.dl_bandwidth_bps = s.dl_bandwidth_bps;
    }
    if !(a.latency_ms.is_finite() && a.latency_ms >= 0.0) {
        return Err(CliError::new(EXIT_VALIDATION, "--latency-ms must be non-negative"));
    }
    let channel = ChannelSpec {
        kind: match a.channel {
            ChannelArg::InProcess => ChannelKind::InProcess,
            ChannelArg::Directory => ChannelKind::DirectoryExchange,
            ChannelArg::Tcp => ChannelKind::Tcp,
        },
        latency_us: (a.latency_ms * 1_000.0).round() as Micros,
        bandwidth_bps: a.bandwidth_bps,
        loss_probability: a.loss,
        seed,
    };
    let mut cfg = RunConfig::new(d, scenario, channel);
    cfg.replay = match a.mode {
        ModeArg::Virtual => ReplayPlan::virtual_clock(),
        ModeArg::RealTime => {
            ReplayPlan::real_time(a.speed).map_err(|e| CliError::new(EXIT_VALIDATION, e))?
        }
    };
    cfg.window_us = a.window_seconds.map(|s| seconds_to_us(s, "--window-seconds")).transpose()?;
    cfg.bin_width_us = seconds_to_us(a.bin_seconds, "--bin-seconds")?;
    cfg.max_lag_bins = a.max_lag_bins;
    cfg.keep_replay_pcaps = a.keep_pcaps;
    cfg.work_dir = Some(match &a.work_dir {
        Some(w) => w.clone(),
        None => a
            .report
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    });
    Ok(cfg)
}

fn cmd_run(a: &RunArgs, out: &mut dyn io::Write) -> Result<(), CliError> {
    let cfg = build_run_config(a)?;
    let outcome = match run(&cfg) {
        Ok(o) => o,
        Err(failure) => {
            if !failure.log.is_empty() {
                let _ = write_partial(&failure.log, &a.report);
            }
            return Err(CliError::new(run_error_code(&failure.error), failure.error));
        }
    };
    let files = write_outputs(&outcome, &a.report).map_err(|e| CliError::new(run_error_code(&e), e))?;
    for f in &files {
        let _ = writeln!(out, "wrote {}", f.display());
    }
    let r = &outcome.report;
    let _ = writeln!(
        out,
        "TAR {:.4}  windows {}/{}  pearson {}  rmse {:.1} bit/s  lag {} bins  SCI {:.4}",
        r.twin_alignment_ratio,
        r.windows_delivered,
        r.windows_planned,
        r.pearson_r.map_or("n/a".to_string(), |p| format!("{p:.6}")),
        r.rmse_bps,
        r.estimated_lag_bins,
        r.consistency_index
    );
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn io::Write, err: &mut dyn io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Ingest(a) => cmd_ingest(a, out, err),
        Command::Emit(a) => cmd_emit(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Segment(a) => cmd_segment(a, out),
        Command::Run(a) => cmd_run(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::two_slice;

    fn cli(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_cli(std::iter::once("twinsync").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(cli(&["bogus"]).0, 2);
        assert_eq!(cli(&["run", "--scenario", "youtube"]).0, 2);
        let (code, out, _) = cli(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("ingest"));
    }

    #[test]
    fn emit_reports_sci() {
        let dir = tempfile::tempdir().unwrap();
        let desc = dir.path().join("d.json");
        fs::write(&desc, descriptor_to_json(&two_slice()).unwrap()).unwrap();
        let bundle = dir.path().join("bundle");
        let (code, out, err) = cli(&["emit", "--descriptor", desc.to_str().unwrap(), "--out-dir", bundle.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("state consistency index: 1"));
        assert_eq!(fs::read_dir(&bundle).unwrap().count(), 4);
        let missing = dir.path().join("nope.json");
        assert_eq!(cli(&["emit", "--descriptor", missing.to_str().unwrap(), "--out-dir", "x"]).0, 2);
    }

    #[test]
    fn simulate_and_segment() {
        let dir = tempfile::tempdir().unwrap();
        let pcap = dir.path().join("voice.pcap");
        let (code, _, err) = cli(&["simulate", "--scenario", "voice", "--duration", "4", "--out", pcap.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
        let windows = dir.path().join("w");
        let (code, out, err) = cli(&[
            "segment", "--input", pcap.to_str().unwrap(), "--window-seconds", "2", "--out-dir", windows.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("wrote 2 windows"), "{out}");
        assert!(windows.join("window_1.pcap").exists());
        assert!(windows.join(manifest_file_name(1)).exists());
        let (code, _, _) = cli(&["simulate", "--scenario", "voice", "--ue-count", "1", "--out", pcap.to_str().unwrap()]);
        assert_eq!(code, 3);
    }
}
