//! Line-oriented text formats: `key = value` files for configs, tallies,
//! reports and calibrations; comma-separated records for dumps.
//!
//! Blank lines and lines starting with `#` are ignored. Reals are written in
//! their shortest round-trip form, so writing then parsing is lossless.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::analysis::{Analysis, Diagnostic};
use crate::channel::{Calibration, DetectionRecord, Outcome};
use crate::model::{Basis, IntensityClass, ProtocolParams, Tally, TallyError};
use crate::pipeline::SimulationConfig;
use crate::sync::{ClockModel, SyncFrame};

/// Version written as the `format` key of tally files.
pub const TALLY_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("missing key `{0}`")]
    Missing(&'static str),
    #[error(transparent)]
    Tally(#[from] TallyError),
}

fn line_err(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Line {
        line,
        message: message.into(),
    }
}

/// Formats a real so that parsing it back yields the identical value.
pub fn fmt_real(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-3..1e7).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// Parsed `key = value` entries with their line numbers.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: Vec<(usize, String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(line_err(i + 1, format!("expected `key = value`, got `{line}`")));
            };
            let key = k.trim().to_string();
            if entries.iter().any(|(_, existing, _)| *existing == key) {
                return Err(line_err(i + 1, format!("duplicate key `{key}`")));
            }
            entries.push((i + 1, key, v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    fn find(&self, key: &str) -> Option<&(usize, String, String)> {
        self.entries.iter().find(|(_, k, _)| k == key)
    }

    pub fn get<T: FromStr>(&self, key: &'static str) -> Result<Option<T>, FormatError> {
        match self.find(key) {
            None => Ok(None),
            Some((line, _, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| line_err(*line, format!("cannot parse `{v}` as the value of `{key}`"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &'static str) -> Result<T, FormatError> {
        self.get(key)?.ok_or(FormatError::Missing(key))
    }

    /// Integer count written either as `123` or as an exact real like `2.4712e11`.
    pub fn get_count(&self, key: &'static str) -> Result<Option<u64>, FormatError> {
        let Some((line, _, v)) = self.find(key) else {
            return Ok(None);
        };
        if let Ok(n) = v.parse::<u64>() {
            return Ok(Some(n));
        }
        match v.parse::<f64>() {
            Ok(x) if x >= 0.0 && x.fract() == 0.0 && x < 1.8e19 => Ok(Some(x as u64)),
            _ => Err(line_err(*line, format!("`{key}` must be a non-negative integer, got `{v}`"))),
        }
    }

    pub fn require_count(&self, key: &'static str) -> Result<u64, FormatError> {
        self.get_count(key)?.ok_or(FormatError::Missing(key))
    }

    fn get_list<const N: usize>(&self, key: &'static str) -> Result<Option<[f64; N]>, FormatError> {
        let Some((line, _, v)) = self.find(key) else {
            return Ok(None);
        };
        let parts: Result<Vec<f64>, _> = v.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parts {
            Ok(p) if p.len() == N => Ok(Some(p.try_into().expect("length checked"))),
            _ => Err(line_err(*line, format!("`{key}` needs {N} comma-separated reals, got `{v}`"))),
        }
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<(), FormatError> {
        match self.entries.iter().find(|(_, k, _)| !known.contains(&k.as_str())) {
            Some((line, k, _)) => Err(line_err(*line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "mu",
    "mu_prime",
    "class_probs",
    "pulse_rate_hz",
    "sync_rate_hz",
    "fiber_length_km",
    "atten_db_per_km",
    "extra_loss_db",
    "detector_efficiencies",
    "dark_rates_hz",
    "misalignment_prob",
    "n_sigma",
    "test_fraction_phase",
    "test_fraction_bit",
    "duration_s",
    "total_pulses",
    "ec_efficiency",
    "drift_ppm",
    "jitter_s",
    "offset_s",
    "guard",
    "perpulse_cap",
];

fn list(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_real(x)).collect::<Vec<_>>().join(", ")
}

/// Writes a simulation config; every key is present.
pub fn write_config(config: &SimulationConfig) -> String {
    let p = &config.params;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("mu", fmt_real(p.mu));
    kv("mu_prime", fmt_real(p.mu_prime));
    kv("class_probs", list(&p.class_probs));
    kv("pulse_rate_hz", fmt_real(p.pulse_rate_hz));
    kv("sync_rate_hz", fmt_real(p.sync_rate_hz));
    kv("fiber_length_km", fmt_real(p.fiber_length_km));
    kv("atten_db_per_km", fmt_real(p.atten_db_per_km));
    kv("extra_loss_db", fmt_real(p.extra_loss_db));
    kv("detector_efficiencies", list(&p.detector_efficiencies));
    kv("dark_rates_hz", list(&p.dark_rates_hz));
    kv("misalignment_prob", fmt_real(p.misalignment_prob));
    kv("n_sigma", fmt_real(p.n_sigma));
    kv("test_fraction_phase", fmt_real(p.test_fraction_phase));
    kv("test_fraction_bit", fmt_real(p.test_fraction_bit));
    kv("duration_s", fmt_real(p.duration_s));
    kv("total_pulses", p.total_pulses.to_string());
    kv("ec_efficiency", fmt_real(p.ec_efficiency));
    kv("drift_ppm", fmt_real(config.clock.drift_ppm));
    kv("jitter_s", fmt_real(config.clock.jitter_s));
    kv("offset_s", fmt_real(config.clock.offset_s));
    kv("guard", fmt_real(config.guard));
    kv("perpulse_cap", config.perpulse_cap.to_string());
    s
}

/// Parses a config; absent keys keep their values from `base`. Parameter
/// invariants are not checked here.
pub fn parse_config(text: &str, base: &SimulationConfig) -> Result<SimulationConfig, FormatError> {
    let kv = KeyValues::parse(text)?;
    kv.reject_unknown(CONFIG_KEYS)?;
    let mut c = base.clone();
    let p = &mut c.params;
    macro_rules! set {
        ($field:expr, $key:literal) => {
            if let Some(v) = kv.get($key)? {
                $field = v;
            }
        };
    }
    set!(p.mu, "mu");
    set!(p.mu_prime, "mu_prime");
    if let Some(v) = kv.get_list::<3>("class_probs")? {
        p.class_probs = v;
    }
    set!(p.pulse_rate_hz, "pulse_rate_hz");
    set!(p.sync_rate_hz, "sync_rate_hz");
    set!(p.fiber_length_km, "fiber_length_km");
    set!(p.atten_db_per_km, "atten_db_per_km");
    set!(p.extra_loss_db, "extra_loss_db");
    if let Some(v) = kv.get_list::<4>("detector_efficiencies")? {
        p.detector_efficiencies = v;
    }
    if let Some(v) = kv.get_list::<4>("dark_rates_hz")? {
        p.dark_rates_hz = v;
    }
    set!(p.misalignment_prob, "misalignment_prob");
    set!(p.n_sigma, "n_sigma");
    set!(p.test_fraction_phase, "test_fraction_phase");
    set!(p.test_fraction_bit, "test_fraction_bit");
    set!(p.duration_s, "duration_s");
    if let Some(v) = kv.get_count("total_pulses")? {
        p.total_pulses = v;
    }
    set!(p.ec_efficiency, "ec_efficiency");
    let mut clock = c.clock;
    set!(clock.drift_ppm, "drift_ppm");
    set!(clock.jitter_s, "jitter_s");
    set!(clock.offset_s, "offset_s");
    c.clock = ClockModel::new(clock.drift_ppm, clock.jitter_s, clock.offset_s).map_err(|e| {
        let line = kv.find("jitter_s").map_or(0, |e| e.0);
        line_err(line, e.to_string())
    })?;
    set!(c.guard, "guard");
    if let Some(v) = kv.get_count("perpulse_cap")? {
        c.perpulse_cap = v;
    }
    Ok(c)
}

/// Contents of a tally file: the observed tally plus the analysis settings
/// that travel with it.
#[derive(Debug, Clone, PartialEq)]
pub struct TallyFile {
    pub tally: Tally,
    pub mu: f64,
    pub mu_prime: f64,
    pub test_fraction_phase: f64,
    pub test_fraction_bit: f64,
    pub duration_s: f64,
    pub pulse_rate_hz: f64,
    pub n_sigma: f64,
}

impl TallyFile {
    pub fn new(tally: Tally, params: &ProtocolParams) -> Self {
        Self {
            tally,
            mu: params.mu,
            mu_prime: params.mu_prime,
            test_fraction_phase: params.test_fraction_phase,
            test_fraction_bit: params.test_fraction_bit,
            duration_s: params.duration_s,
            pulse_rate_hz: params.pulse_rate_hz,
            n_sigma: params.n_sigma,
        }
    }

    /// `base` overridden by the settings carried in the file.
    pub fn params(&self, base: &ProtocolParams) -> ProtocolParams {
        ProtocolParams {
            mu: self.mu,
            mu_prime: self.mu_prime,
            test_fraction_phase: self.test_fraction_phase,
            test_fraction_bit: self.test_fraction_bit,
            duration_s: self.duration_s,
            pulse_rate_hz: self.pulse_rate_hz,
            n_sigma: self.n_sigma,
            total_pulses: self.tally.n_sent().iter().sum(),
            ..base.clone()
        }
    }
}

/// Keys: `N*` pulses sent, `C*` detections, `E*` QBERs, `test*` the number of
/// bits each QBER was measured on (0 when unknown), plus the analysis settings.
pub fn write_tally(file: &TallyFile) -> String {
    let t = &file.tally;
    let [n0, n1, n2] = t.n_sent();
    let [c0, c1, c2] = t.c_received();
    let mut s = format!("format = {TALLY_FORMAT}\n");
    for (k, v) in [
        ("N0", n0.to_string()),
        ("Nmu", n1.to_string()),
        ("Nmup", n2.to_string()),
        ("C0", c0.to_string()),
        ("Cmu", c1.to_string()),
        ("Cmup", c2.to_string()),
        ("Emu", fmt_real(t.qber(IntensityClass::Decoy))),
        ("Emup", fmt_real(t.qber(IntensityClass::Signal))),
        ("Lp", fmt_real(file.test_fraction_phase)),
        ("Lb", fmt_real(file.test_fraction_bit)),
        ("T", fmt_real(file.duration_s)),
        ("f", fmt_real(file.pulse_rate_hz)),
        ("mu", fmt_real(file.mu)),
        ("mup", fmt_real(file.mu_prime)),
        ("nsigma", fmt_real(file.n_sigma)),
        ("test0", t.test_count(IntensityClass::Vacuum).to_string()),
        ("testmu", t.test_count(IntensityClass::Decoy).to_string()),
        ("testmup", t.test_count(IntensityClass::Signal).to_string()),
    ] {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

pub fn parse_tally(text: &str) -> Result<TallyFile, FormatError> {
    let kv = KeyValues::parse(text)?;
    kv.reject_unknown(&[
        "format", "N0", "Nmu", "Nmup", "C0", "Cmu", "Cmup", "Emu", "Emup", "Lp", "Lb", "T", "f", "mu",
        "mup", "nsigma", "test0", "testmu", "testmup",
    ])?;
    let format: u32 = kv.require("format")?;
    if format != TALLY_FORMAT {
        let line = kv.find("format").map_or(0, |e| e.0);
        return Err(line_err(line, format!("unsupported tally format {format}")));
    }
    let tally = Tally::new(
        [kv.require_count("N0")?, kv.require_count("Nmu")?, kv.require_count("Nmup")?],
        [kv.require_count("C0")?, kv.require_count("Cmu")?, kv.require_count("Cmup")?],
        [kv.require("Emu")?, kv.require("Emup")?],
        [
            kv.get_count("test0")?.unwrap_or(0),
            kv.get_count("testmu")?.unwrap_or(0),
            kv.get_count("testmup")?.unwrap_or(0),
        ],
    )?;
    Ok(TallyFile {
        tally,
        mu: kv.require("mu")?,
        mu_prime: kv.require("mup")?,
        test_fraction_phase: kv.require("Lp")?,
        test_fraction_bit: kv.require("Lb")?,
        duration_s: kv.require("T")?,
        pulse_rate_hz: kv.require("f")?,
        n_sigma: kv.require("nsigma")?,
    })
}

/// Report lines for every bound, rate and diagnostic.
pub fn write_report(a: &Analysis) -> String {
    let b = &a.bounds;
    let r = &a.report;
    let mut s = String::new();
    for (k, v) in [
        ("r0", b.r0),
        ("s0_low", b.s0_low),
        ("s0_high", b.s0_high),
        ("E_u_mup", b.e_upper_mu_prime),
        ("E_u_mu", b.e_upper_mu),
        ("s1_prime", b.s1_prime),
        ("s1", b.s1),
        ("s_c", b.s_c),
        ("delta1_mup", b.delta1_mu_prime),
        ("delta1_mu", b.delta1_mu),
        ("E1_mup", b.e1_mu_prime),
        ("E1_mu", b.e1_mu),
        ("R_mup", r.r_mu_prime),
        ("R_mu", r.r_mu),
        ("K_mup", r.k_mu_prime),
        ("K_mu", r.k_mu),
        ("rate_mup_hz", r.rate_mu_prime_hz),
        ("rate_mu_hz", r.rate_mu_hz),
        ("rate_total_hz", r.rate_total_hz),
    ] {
        let _ = writeln!(s, "{k} = {}", fmt_real(v));
    }
    for (name, solver) in ["decoy", "signal"].iter().zip(&a.solver) {
        let _ = writeln!(s, "solver_iterations_{name} = {}", solver.iterations);
        let _ = writeln!(s, "solver_residual_{name} = {}", fmt_real(solver.relative_residual));
    }
    let _ = writeln!(s, "flagged = {}", a.flagged());
    for d in &a.diagnostics {
        match d {
            Diagnostic::Clamped { quantity, raw } => {
                let _ = writeln!(s, "# clamped {quantity} (raw {})", fmt_real(*raw));
            }
            Diagnostic::BranchFailed { class, error } => {
                let _ = writeln!(s, "# no key from {class:?} pulses: {error}");
            }
        }
    }
    s
}

pub fn write_calibration(c: &Calibration) -> String {
    let mut s = String::new();
    for (k, v) in [
        ("transmittance", c.channel.transmittance()),
        ("loss_db", c.channel.loss_db()),
        ("extra_loss_db", c.extra_loss_db),
        ("misalignment_prob", c.channel.misalignment_prob()),
        ("dark_rate_hz", c.dark_rate_hz),
        ("eta_sys", c.eta_sys),
        ("residual_s_mu", c.residual_s_mu),
        ("residual_e_mu", c.residual_e_mu),
        ("residual_e_mup", c.residual_e_mu_prime),
    ] {
        let _ = writeln!(s, "{k} = {}", fmt_real(v));
    }
    s
}

/// Seconds to the nanosecond text used in timestamp files (picosecond resolution).
pub fn fmt_ns(t_s: f64) -> String {
    format!("{:.3}", t_s * 1e9)
}

fn parse_ns(field: &str, line: usize) -> Result<f64, FormatError> {
    field
        .trim()
        .parse::<f64>()
        .map(|ns| ns * 1e-9)
        .map_err(|_| line_err(line, format!("bad timestamp `{field}`")))
}

/// `slot_index,basis,outcome,detector,timestamp_ns`.
pub fn format_detection(d: &DetectionRecord) -> String {
    let (outcome, detector) = match d.outcome {
        Outcome::NoClick => ("none", "-".to_string()),
        Outcome::Click(i) => ("click", i.to_string()),
        Outcome::DoubleClick(i) => ("double", i.to_string()),
    };
    format!(
        "{},{},{},{},{}",
        d.slot_index,
        d.basis_chosen.code(),
        outcome,
        detector,
        fmt_ns(d.timestamp_s)
    )
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>, FormatError> {
    records(text)
        .map(|(line, fields)| {
            let [slot, basis, outcome, det, ts] = fields[..] else {
                return Err(line_err(line, "expected 5 comma-separated fields"));
            };
            let slot_index = slot
                .parse()
                .map_err(|_| line_err(line, format!("bad slot index `{slot}`")))?;
            let basis_chosen = basis
                .chars()
                .next()
                .and_then(Basis::from_code)
                .filter(|_| basis.len() == 1)
                .ok_or_else(|| line_err(line, format!("bad basis `{basis}`")))?;
            let det = || {
                det.parse::<u8>()
                    .ok()
                    .filter(|&d| d < 4)
                    .ok_or_else(|| line_err(line, format!("bad detector `{det}`")))
            };
            let outcome = match outcome {
                "none" => Outcome::NoClick,
                "click" => Outcome::Click(det()?),
                "double" => Outcome::DoubleClick(det()?),
                other => return Err(line_err(line, format!("bad outcome `{other}`"))),
            };
            Ok(DetectionRecord {
                slot_index,
                basis_chosen,
                outcome,
                timestamp_s: parse_ns(ts, line)?,
            })
        })
        .collect()
}

/// `block_index,timestamp_ns`.
pub fn format_frame(f: &SyncFrame) -> String {
    format!("{},{}", f.block_index, fmt_ns(f.sync_timestamp_s))
}

pub fn parse_frames(text: &str, slots_per_block: u64) -> Result<Vec<SyncFrame>, FormatError> {
    records(text)
        .map(|(line, fields)| {
            let [block, ts] = fields[..] else {
                return Err(line_err(line, "expected `block_index,timestamp_ns`"));
            };
            Ok(SyncFrame {
                block_index: block
                    .parse()
                    .map_err(|_| line_err(line, format!("bad block index `{block}`")))?,
                sync_timestamp_s: parse_ns(ts, line)?,
                slots_per_block,
            })
        })
        .collect()
}

/// One `timestamp_ns` per line.
pub fn parse_timestamps(text: &str) -> Result<Vec<f64>, FormatError> {
    records(text)
        .map(|(line, fields)| match fields[..] {
            [ts] => parse_ns(ts, line),
            _ => Err(line_err(line, "expected a single timestamp")),
        })
        .collect()
}

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split(',').map(str::trim).collect()))
    })
}

/// Reads a pulse-plan dump line back into `(slot, class, polarization)` codes.
pub fn parse_plan_line(line: &str) -> Option<(u64, IntensityClass, Option<char>)> {
    let mut it = line.trim().split(',');
    let slot = it.next()?.parse().ok()?;
    let class = IntensityClass::from_code(it.next()?.chars().next()?)?;
    let pol = match it.next()? {
        "-" => None,
        p => Some(p.chars().next()?),
    };
    it.next().is_none().then_some((slot, class, pol))
}
