use std::fmt::Display;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use decoy_qkd::analysis::analyze;
use decoy_qkd::channel::{calibrate_channel, ChannelError};
use decoy_qkd::io::{
    format_detection, format_frame, parse_config, parse_tally, write_calibration, write_config,
    write_report, write_tally, TallyFile,
};
use decoy_qkd::model::ProtocolParams;
use decoy_qkd::pipeline::{generation_block, simulate, Mode, PipelineError, SimulationConfig};
use decoy_qkd::source::{format_plan, SourceStream};

mod reproduce;

#[derive(Parser)]
#[command(name = "decoyqkd", version, about = "Decoy-state BB84 simulator and finite-size key-rate analyzer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a run and write its tally.
    Simulate(SimulateArgs),
    /// Bound the single-photon contribution and compute the secure key of a tally.
    Analyze(AnalyzeArgs),
    /// Recompute the published 200 km table and compare row by row.
    Reproduce(ReproduceArgs),
    /// Fit channel transmittance, misalignment and dark rate to a tally.
    Calibrate(CalibrateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Perpulse,
    Aggregate,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// `key = value` config; absent keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output tally file (stdout if omitted).
    #[arg(long)]
    tally: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Aggregate)]
    mode: ModeArg,
    /// Bob's detections after slot recovery (per-pulse mode).
    #[arg(long)]
    dump_detections: Option<PathBuf>,
    /// Sync pulse arrivals on Bob's clock (per-pulse mode).
    #[arg(long)]
    dump_sync: Option<PathBuf>,
    /// Alice's pulse plans (per-pulse mode).
    #[arg(long)]
    dump_pulses: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    #[arg(long)]
    tally: PathBuf,
    /// Supplies settings the tally file does not carry, e.g. `ec_efficiency`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output report (stdout if omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReproduceArgs {
    /// Override the fluctuation width.
    #[arg(long)]
    nsigma: Option<f64>,
    /// Override the error-correction inefficiency.
    #[arg(long)]
    ec_efficiency: Option<f64>,
}

#[derive(clap::Args)]
struct CalibrateArgs {
    #[arg(long)]
    tally: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output calibration file (stdout if omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write a full simulation config with the fitted channel.
    #[arg(long)]
    write_config: Option<PathBuf>,
}

/// Failure classes and their exit statuses.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Io(String),
    Analysis(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Io(_) => 3,
            Failure::Analysis(_) => 4,
        }
    }
}

impl Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::Io(m) => write!(f, "I/O error: {m}"),
            Failure::Analysis(m) => write!(f, "analysis failed: {m}"),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

/// Writes `text` to `path`, or stdout when `path` is `None`.
fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Io(format!("{}: {e}", p.display()))),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Io(format!("stdout: {e}"))),
    }
}

fn emit_lines<I: IntoIterator<Item = String>>(path: &Path, header: &str, lines: I) -> Result<(), Failure> {
    let io_err = |e: io::Error| Failure::Io(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    writeln!(w, "# {header}").map_err(io_err)?;
    for line in lines {
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn load_config(path: Option<&Path>) -> Result<SimulationConfig, Failure> {
    let base = SimulationConfig::default();
    let Some(path) = path else { return Ok(base) };
    parse_config(&read(path)?, &base).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn validated(params: ProtocolParams) -> Result<ProtocolParams, Failure> {
    params.validate().map_err(|e| Failure::Validation(e.to_string()))
}

fn load_tally(path: &Path) -> Result<TallyFile, Failure> {
    parse_tally(&read(path)?).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.as_deref())?;
    config.params = validated(config.params)?;
    let mode = match args.mode {
        ModeArg::Perpulse => Mode::PerPulse,
        ModeArg::Aggregate => Mode::Aggregate,
    };
    let dumps = args.dump_detections.is_some() || args.dump_sync.is_some() || args.dump_pulses.is_some();
    if dumps && mode == Mode::Aggregate {
        return Err(Failure::Validation("dumps need --mode perpulse".into()));
    }

    let out = simulate(&config, args.seed, mode, dumps).map_err(|e| match e {
        PipelineError::Channel(ChannelError::Overflow(_)) => Failure::Analysis(e.to_string()),
        _ => Failure::Validation(e.to_string()),
    })?;
    let tally = out
        .tally()
        .map_err(|e| Failure::Analysis(format!("no tally can be formed: {e}")))?;
    emit(args.tally.as_deref(), &write_tally(&TallyFile::new(tally.clone(), &config.params)))?;

    if let (Some(path), Some(dets)) = (&args.dump_detections, &out.detections) {
        emit_lines(path, "slot_index,basis,outcome,detector,timestamp_ns", dets.iter().map(format_detection))?;
    }
    if let (Some(path), Some(frames)) = (&args.dump_sync, &out.frames) {
        emit_lines(path, "block_index,timestamp_ns", frames.iter().map(format_frame))?;
    }
    if let Some(path) = &args.dump_pulses {
        let params = &config.params;
        let source = SourceStream::new(args.seed, generation_block(params), params);
        let blocks = params.total_pulses.div_ceil(source.block_size());
        let plans = (0..blocks)
            .flat_map(|b| source.generate_block(b))
            .take(params.total_pulses as usize);
        emit_lines(path, "slot_index,class,polarization", plans.map(|p| format_plan(&p)))?;
    }

    let c = tally.c_received();
    eprintln!("detections (vacuum, decoy, signal): {} {} {}", c[0], c[1], c[2]);
    let s = out.sync;
    if s.ambiguous + s.orphan + s.out_of_range + s.misindexed > 0 {
        eprintln!(
            "synchronization: {} ambiguous, {} orphaned, {} out of range, {} misindexed",
            s.ambiguous, s.orphan, s.out_of_range, s.misindexed
        );
    }
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let base = load_config(args.config.as_deref())?;
    let file = load_tally(&args.tally)?;
    let params = validated(file.params(&base.params))?;
    let analysis = analyze(&file.tally, &params).map_err(|e| Failure::Analysis(e.to_string()))?;
    emit(args.report.as_deref(), &write_report(&analysis))?;
    let r = &analysis.report;
    eprintln!(
        "secure key rate {:.4} Hz (signal {:.4}, decoy {:.4}){}",
        r.rate_total_hz,
        r.rate_mu_prime_hz,
        r.rate_mu_hz,
        if analysis.flagged() { "; see flagged diagnostics" } else { "" }
    );
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.as_deref())?;
    let file = load_tally(&args.tally)?;
    let params = validated(file.params(&config.params))?;
    let cal = calibrate_channel(&file.tally, &params).map_err(|e| match e {
        ChannelError::NoSolution(m) => Failure::Analysis(format!("no channel fits the tally: {m}")),
        other => Failure::Analysis(other.to_string()),
    })?;
    emit(args.output.as_deref(), &write_calibration(&cal))?;
    if let Some(path) = &args.write_config {
        config.params = cal.apply(&params);
        emit(Some(path), &write_config(&config))?;
    }
    if cal.residual_e_mu_prime != 0.0 {
        eprintln!(
            "signal QBER not reachable; misalignment clamped (misfit {:e})",
            cal.residual_e_mu_prime
        );
    }
    eprintln!(
        "decoy rate misfit {:+.3}%, decoy QBER misfit {:+.4}",
        cal.residual_s_mu * 100.0,
        cal.residual_e_mu
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Reproduce(a) => reproduce::run(a.nsigma, a.ec_efficiency),
        Command::Calibrate(a) => cmd_calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("decoyqkd: {f}");
            ExitCode::from(f.code())
        }
    }
}
