//! End-to-end simulation: source -> channel/detectors -> synchronizer ->
//! sifting -> tally.

use thiserror::Error;

use crate::channel::{
    simulate_aggregate, AggregateCounts, ChannelError, ChannelModel, ClassExpectation,
    DetectionRecord, Outcome, Receiver,
};
use crate::model::{IntensityClass, ProtocolParams, Tally};
use crate::rng::{block_rng, Stream};
use crate::sifting::{sample_test_bits, sift, tally_from_aggregate, QberPolicy, SiftError};
use crate::source::{class_histogram, SourceStream};
use crate::sync::{emit_timestamps, recover_each, ClockModel, Recovered, SyncError, SyncFrame, DEFAULT_GUARD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Every pulse is generated, detected, timestamped and sifted.
    PerPulse,
    /// Analytic outcome probabilities with binomial sampling.
    Aggregate,
}

/// Everything a simulation run needs besides the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub params: ProtocolParams,
    pub clock: ClockModel,
    /// Guard band for slot recovery, in slots.
    pub guard: f64,
    /// Largest `total_pulses` accepted in per-pulse mode.
    pub perpulse_cap: u64,
    pub qber_policy: QberPolicy,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            params: ProtocolParams::default(),
            clock: ClockModel::default(),
            guard: DEFAULT_GUARD,
            perpulse_cap: 1_000_000_000,
            qber_policy: QberPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("{requested} pulses exceed the per-pulse cap of {cap}; use aggregate mode")]
    PerPulseCap { requested: u64, cap: u64 },
}

/// Detections lost between Bob's detectors and sifting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SyncStats {
    pub ambiguous: u64,
    pub orphan: u64,
    /// Recovered to a slot outside the generated range.
    pub out_of_range: u64,
    /// Recovered to the wrong slot (known only to the simulator).
    pub misindexed: u64,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub counts: AggregateCounts,
    pub sync: SyncStats,
    /// Present when requested, per-pulse mode only: Bob's clicks with
    /// recovered slot indices and local timestamps.
    pub detections: Option<Vec<DetectionRecord>>,
    pub frames: Option<Vec<SyncFrame>>,
    tally: Result<Tally, SiftError>,
}

impl SimulationOutput {
    pub fn tally(&self) -> Result<&Tally, &SiftError> {
        self.tally.as_ref()
    }
}

/// Pulses per generated block: a whole number of sync blocks.
pub fn generation_block(params: &ProtocolParams) -> u64 {
    params.slots_per_block() * (1_000_000 / params.slots_per_block()).max(1)
}

fn expectations(params: &ProtocolParams, rx: &Receiver) -> [ClassExpectation; 3] {
    IntensityClass::ALL.map(|class| {
        let st = rx.class_statistics(class);
        let n = params.total_pulses as f64 * params.class_probs[class.index()];
        ClassExpectation {
            sent: n,
            clicks: n * st.click,
            sifted: n * st.sifted,
            errors: n * st.sifted_error,
        }
    })
}

/// Runs one simulation. Identical `(config, seed, mode)` give identical output.
pub fn simulate(
    config: &SimulationConfig,
    seed: u64,
    mode: Mode,
    keep_detections: bool,
) -> Result<SimulationOutput, PipelineError> {
    let params = &config.params;
    let channel = ChannelModel::from_params(params)?;
    match mode {
        Mode::Aggregate => {
            let mut rng = block_rng(seed, Stream::Aggregate, 0);
            let counts = simulate_aggregate(params, &channel, params.total_pulses, &mut rng)?;
            let tally = tally_from_aggregate(&counts, config.qber_policy);
            Ok(SimulationOutput {
                counts,
                sync: SyncStats::default(),
                detections: None,
                frames: None,
                tally,
            })
        }
        Mode::PerPulse => per_pulse(config, &channel, seed, keep_detections),
    }
}

fn per_pulse(
    config: &SimulationConfig,
    channel: &ChannelModel,
    seed: u64,
    keep: bool,
) -> Result<SimulationOutput, PipelineError> {
    let params = &config.params;
    let total = params.total_pulses;
    if total > config.perpulse_cap {
        return Err(PipelineError::PerPulseCap {
            requested: total,
            cap: config.perpulse_cap,
        });
    }
    let rx = Receiver::new(channel, params);
    let block = generation_block(params);
    let source = SourceStream::new(seed, block, params);

    let mut counts = AggregateCounts {
        expected: expectations(params, &rx),
        ..Default::default()
    };
    let mut sync = SyncStats::default();
    let mut kept_detections = keep.then(Vec::new);
    let mut kept_frames = keep.then(Vec::new);

    for b in 0..total.div_ceil(block) {
        let mut plans = source.generate_block(b);
        plans.truncate((total - b * block).min(block) as usize);
        let hist = class_histogram(&plans);

        let mut det_rng = block_rng(seed, Stream::Detection, b);
        let clicks: Vec<DetectionRecord> = plans
            .iter()
            .map(|p| rx.detect(p, &mut det_rng))
            .filter(|r| r.outcome != Outcome::NoClick)
            .collect();

        let slots: Vec<u64> = clicks.iter().map(|r| r.slot_index).collect();
        let mut clock_rng = block_rng(seed, Stream::Clock, b);
        let stamps = emit_timestamps(&slots, &config.clock, params, &mut clock_rng)?;
        let recovered = recover_each(&stamps.detections_s, &stamps.frames, params, config.guard);

        let first = plans.first().map_or(0, |p| p.slot_index());
        let end = first + plans.len() as u64;
        let mut bob = Vec::with_capacity(clicks.len());
        for ((rec, &t), r) in clicks.iter().zip(&stamps.detections_s).zip(recovered) {
            match r {
                Recovered::Slot(s) if (first..end).contains(&s) => {
                    sync.misindexed += (s != rec.slot_index) as u64;
                    bob.push(DetectionRecord {
                        slot_index: s,
                        timestamp_s: t,
                        ..*rec
                    });
                }
                Recovered::Slot(_) => sync.out_of_range += 1,
                Recovered::Ambiguous(_) => sync.ambiguous += 1,
                Recovered::Orphan => sync.orphan += 1,
            }
        }

        // Bob's slot indices address Alice's plans; every detection counts
        // toward C_k of the class Alice sent in that slot.
        for d in &bob {
            let k = plans[(d.slot_index - first) as usize].class().index();
            counts.sampled[k].clicks += 1;
        }
        let sifted = sift(&plans, &bob).expect("recovered slots lie inside the block");
        let mut sift_rng = block_rng(seed, Stream::Sifting, b);
        let part = sample_test_bits(
            sifted,
            params.test_fraction_phase,
            params.test_fraction_bit,
            &mut sift_rng,
        );
        for bit in part.all() {
            let c = &mut counts.sampled[bit.class.index()];
            c.sifted += 1;
            c.errors += bit.is_error() as u64;
        }
        for bit in &part.phase_test {
            let c = &mut counts.sampled[bit.class.index()];
            c.phase_test += 1;
            c.phase_test_errors += bit.is_error() as u64;
        }
        for bit in &part.bit_test {
            counts.sampled[bit.class.index()].bit_test += 1;
        }
        for k in 0..3 {
            counts.sampled[k].sent += hist.by_class[k];
        }

        if let Some(d) = kept_detections.as_mut() {
            d.extend(bob);
        }
        if let Some(f) = kept_frames.as_mut() {
            f.extend(stamps.frames);
        }
    }

    let tally = tally_from_aggregate(&counts, config.qber_policy);
    Ok(SimulationOutput {
        counts,
        sync,
        detections: kept_detections,
        frames: kept_frames,
        tally,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lossless(n: u64) -> SimulationConfig {
        SimulationConfig {
            params: ProtocolParams {
                fiber_length_km: 0.0,
                dark_rates_hz: [0.0; 4],
                misalignment_prob: 0.0,
                total_pulses: n,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_per_pulse_has_zero_qber() {
        let out = simulate(&lossless(1_000_000), 1, Mode::PerPulse, false).unwrap();
        let t = out.tally().unwrap();
        assert_eq!(t.qber(IntensityClass::Decoy), 0.0);
        assert_eq!(t.qber(IntensityClass::Signal), 0.0);
        assert_eq!(t.received(IntensityClass::Vacuum), 0);
        assert_eq!(out.sync, SyncStats::default());
        assert_eq!(out.counts.sampled.iter().map(|c| c.sent).sum::<u64>(), 1_000_000);
    }

    #[test]
    fn per_pulse_cap() {
        let cfg = SimulationConfig::default();
        assert!(matches!(
            simulate(&cfg, 1, Mode::PerPulse, false),
            Err(PipelineError::PerPulseCap { .. })
        ));
    }

    #[test]
    fn deterministic_per_seed() {
        let mut cfg = lossless(300_000);
        cfg.params.dark_rates_hz = [1e5; 4];
        cfg.params.misalignment_prob = 0.03;
        cfg.clock = ClockModel::new(20.0, 2e-11, 0.5).unwrap();
        let a = simulate(&cfg, 9, Mode::PerPulse, true).unwrap();
        let b = simulate(&cfg, 9, Mode::PerPulse, true).unwrap();
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.detections, b.detections);
        let c = simulate(&cfg, 10, Mode::PerPulse, false).unwrap();
        assert_ne!(a.counts, c.counts);
    }

    #[test]
    fn partial_last_block() {
        let n = generation_block(&ProtocolParams::default()) + 12_345;
        let out = simulate(&lossless(n), 4, Mode::PerPulse, false).unwrap();
        assert_eq!(out.counts.sampled.iter().map(|c| c.sent).sum::<u64>(), n);
    }

    #[test]
    fn sifted_fraction_is_half() {
        let mut cfg = lossless(2_000_000);
        cfg.params.detector_efficiencies = [0.1; 4];
        let out = simulate(&cfg, 3, Mode::PerPulse, false).unwrap();
        for class in [IntensityClass::Decoy, IntensityClass::Signal] {
            let c = out.counts.class(class);
            let n = c.clicks as f64;
            let sd = (n * 0.25).sqrt();
            assert!((c.sifted as f64 - 0.5 * n).abs() < 5.0 * sd, "{class:?} {c:?}");
        }
        let vac = out.counts.class(IntensityClass::Vacuum);
        assert_eq!(vac.sifted, vac.clicks);
    }

    #[test]
    fn drifting_clock_loses_block_tails() {
        let mut cfg = lossless(400_000);
        cfg.params.detector_efficiencies = [1.0; 4];
        cfg.clock = ClockModel::new(70.0, 0.0, 0.0).unwrap();
        cfg.guard = 0.0;
        let out = simulate(&cfg, 5, Mode::PerPulse, false).unwrap();
        assert!(out.sync.misindexed > 0);
    }
}
