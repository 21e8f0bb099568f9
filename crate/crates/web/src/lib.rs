//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain Rust function so the numerics
//! can be tested natively.

use wasm_bindgen::prelude::*;

use decoy_qkd::analysis::analyze;
use decoy_qkd::channel::{calibrate_channel, Receiver};
use decoy_qkd::io::{parse_tally, write_report};
use decoy_qkd::model::{IntensityClass, ProtocolParams, Tally};
use decoy_qkd::rng::{block_rng, Stream};
use decoy_qkd::sync::{emit_timestamps, recover_each, ClockModel, Recovered};
use decoy_qkd::ChannelModel;

/// Report for a tally file, or the reason it could not be analyzed.
pub fn report_for(tally_text: &str, ec_efficiency: f64) -> Result<String, String> {
    let file = parse_tally(tally_text).map_err(|e| e.to_string())?;
    let base = ProtocolParams {
        ec_efficiency,
        ..Default::default()
    };
    let params = file.params(&base).validate().map_err(|e| e.to_string())?;
    let analysis = analyze(&file.tally, &params).map_err(|e| e.to_string())?;
    Ok(write_report(&analysis))
}

/// The published link with its channel fitted to the published tally.
fn fitted_link() -> ProtocolParams {
    let base = ProtocolParams::default();
    calibrate_channel(&Tally::reference_200km(), &base)
        .map(|c| c.apply(&base))
        .unwrap_or(base)
}

/// Noise-free tally: every count at its expectation.
fn expected_tally(params: &ProtocolParams) -> Option<Tally> {
    let channel = ChannelModel::from_params(params).ok()?;
    let rx = Receiver::new(&channel, params);
    let n = params.nominal_split();
    let c = IntensityClass::ALL.map(|k| (n[k.index()] as f64 * rx.class_statistics(k).click).round() as u64);
    let e = [IntensityClass::Decoy, IntensityClass::Signal].map(|k| rx.class_statistics(k).qber());
    Tally::new(n, c, e, [0; 3]).ok()
}

/// Secure key rate in Hz at each fiber length `0, step, 2 step, .. <= max`.
/// Lengths where no key survives give 0.
pub fn key_rates(max_km: f64, step_km: f64, log10_pulses: f64, n_sigma: f64) -> Vec<f64> {
    let link = fitted_link();
    let steps = (max_km / step_km).floor().max(0.0) as usize;
    (0..=steps)
        .map(|i| {
            let mut params = ProtocolParams {
                fiber_length_km: i as f64 * step_km,
                total_pulses: 10f64.powf(log10_pulses) as u64,
                n_sigma,
                ..link.clone()
            };
            params.duration_s = params.total_pulses as f64 / params.pulse_rate_hz;
            expected_tally(&params)
                .and_then(|t| analyze(&t, &params).ok())
                .map_or(0.0, |a| a.report.rate_total_hz)
        })
        .collect()
}

/// Fraction of detections that cannot be placed in their true slot, at each
/// clock drift `0, step, .. <= max` ppm. Every slot of two sync blocks is
/// probed.
pub fn sync_losses(max_ppm: f64, step_ppm: f64, jitter_ps: f64, guard: f64) -> Vec<f64> {
    let params = ProtocolParams::default();
    let slots: Vec<u64> = (0..2 * params.slots_per_block()).collect();
    let steps = (max_ppm / step_ppm).floor().max(0.0) as usize;
    (0..=steps)
        .map(|i| {
            let Ok(clock) = ClockModel::new(i as f64 * step_ppm, jitter_ps * 1e-12, 0.0) else {
                return f64::NAN;
            };
            let mut rng = block_rng(0, Stream::Clock, i as u64);
            let Ok(ts) = emit_timestamps(&slots, &clock, &params, &mut rng) else {
                return f64::NAN;
            };
            let lost = recover_each(&ts.detections_s, &ts.frames, &params, guard)
                .iter()
                .zip(&slots)
                .filter(|(r, &s)| **r != Recovered::Slot(s))
                .count();
            lost as f64 / slots.len() as f64
        })
        .collect()
}

#[wasm_bindgen]
pub fn analyze_tally(tally_text: &str, ec_efficiency: f64) -> Result<String, JsError> {
    report_for(tally_text, ec_efficiency).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn key_rate_curve(max_km: f64, step_km: f64, log10_pulses: f64, n_sigma: f64) -> Vec<f64> {
    key_rates(max_km, step_km, log10_pulses, n_sigma)
}

#[wasm_bindgen]
pub fn drift_sweep(max_ppm: f64, step_ppm: f64, jitter_ps: f64, guard: f64) -> Vec<f64> {
    sync_losses(max_ppm, step_ppm, jitter_ps, guard)
}
