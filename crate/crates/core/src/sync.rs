//! Block-wise slot synchronization.
//!
//! Alice derives one sync pulse every `slots_per_block` pulse slots from her
//! master clock. Bob timestamps sync pulses and detections with a free-running
//! local clock (the TDC) that may run fast or slow and jitter. A detection's
//! absolute slot is recovered from the most recent sync pulse by counting
//! nominal slot periods; this works as long as the accumulated drift over one
//! block stays below half a slot.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::ProtocolParams;

/// Default half-width of the rejection band around half-integer slot offsets.
pub const DEFAULT_GUARD: f64 = 0.05;

/// Bob's local clock relative to Alice's.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClockModel {
    /// Relative frequency error in parts per million.
    pub drift_ppm: f64,
    /// RMS Gaussian timestamp jitter in seconds.
    pub jitter_s: f64,
    pub offset_s: f64,
}

impl ClockModel {
    pub fn new(drift_ppm: f64, jitter_s: f64, offset_s: f64) -> Result<Self, SyncError> {
        if !(jitter_s >= 0.0 && jitter_s.is_finite()) {
            return Err(SyncError::NegativeJitter(jitter_s));
        }
        Ok(Self {
            drift_ppm,
            jitter_s,
            offset_s,
        })
    }

    /// Noise-free local reading of true time `t`.
    pub fn local_time(&self, t: f64) -> f64 {
        self.offset_s + t * (1.0 + self.drift_ppm * 1e-6)
    }
}

/// Arrival of one sync pulse on Bob's clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncFrame {
    pub sync_timestamp_s: f64,
    pub block_index: u64,
    pub slots_per_block: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyncError {
    #[error("clock jitter must be non-negative, got {0}")]
    NegativeJitter(f64),
    #[error("slot indices must be sorted ascending")]
    Unsorted,
    #[error("detection at {timestamp_s} s precedes every sync frame")]
    NoFrame { timestamp_s: f64 },
    #[error("detection at {timestamp_s} s sits {offset} slots after its sync pulse, inside the guard band")]
    AmbiguousSlot { timestamp_s: f64, offset: f64 },
}

/// Output of [`emit_timestamps`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timestamps {
    /// One per input slot, in input order.
    pub detections_s: Vec<f64>,
    /// One per block spanned by the input, ascending.
    pub frames: Vec<SyncFrame>,
}

/// Observed times of `slot_indices` and of the sync pulses of every block from
/// the first to the last slot's block.
pub fn emit_timestamps<R: Rng + ?Sized>(
    slot_indices: &[u64],
    clock: &ClockModel,
    params: &ProtocolParams,
    rng: &mut R,
) -> Result<Timestamps, SyncError> {
    if slot_indices.windows(2).any(|w| w[0] > w[1]) {
        return Err(SyncError::Unsorted);
    }
    let (Some(&first), Some(&last)) = (slot_indices.first(), slot_indices.last()) else {
        return Ok(Timestamps::default());
    };
    let noise = Normal::new(0.0, clock.jitter_s).map_err(|_| SyncError::NegativeJitter(clock.jitter_s))?;
    let mut observe = |slot: u64| {
        let t = clock.local_time(slot as f64 / params.pulse_rate_hz);
        if clock.jitter_s > 0.0 {
            t + noise.sample(rng)
        } else {
            t
        }
    };

    let spb = params.slots_per_block();
    let frames = (first / spb..=last / spb)
        .map(|block_index| SyncFrame {
            sync_timestamp_s: observe(block_index * spb),
            block_index,
            slots_per_block: spb,
        })
        .collect();
    let detections_s = slot_indices.iter().map(|&s| observe(s)).collect();
    Ok(Timestamps {
        detections_s,
        frames,
    })
}

/// Recovery of one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Recovered {
    Slot(u64),
    /// Offset from the sync pulse, in nominal slots, fell inside the guard band.
    Ambiguous(f64),
    /// No sync frame at or before the detection.
    Orphan,
}

fn frame_for(frames: &[SyncFrame], t: f64) -> Option<&SyncFrame> {
    let i = frames.partition_point(|f| f.sync_timestamp_s <= t);
    i.checked_sub(1).map(|i| &frames[i])
}

/// Recovers each detection independently; never fails.
pub fn recover_each(
    timestamps: &[f64],
    frames: &[SyncFrame],
    params: &ProtocolParams,
    guard: f64,
) -> Vec<Recovered> {
    let slot_period = 1.0 / params.pulse_rate_hz;
    timestamps
        .iter()
        .map(|&t| {
            let Some(frame) = frame_for(frames, t) else {
                return Recovered::Orphan;
            };
            let offset = (t - frame.sync_timestamp_s) / slot_period;
            if guard > 0.0 && (offset.fract() - 0.5).abs() < guard {
                return Recovered::Ambiguous(offset);
            }
            Recovered::Slot(frame.block_index * frame.slots_per_block + offset.round() as u64)
        })
        .collect()
}

/// Absolute slot indices of `timestamps`, failing on the first detection that
/// cannot be placed unambiguously.
pub fn recover_indices(
    timestamps: &[f64],
    frames: &[SyncFrame],
    params: &ProtocolParams,
    guard: f64,
) -> Result<Vec<u64>, SyncError> {
    recover_each(timestamps, frames, params, guard)
        .into_iter()
        .zip(timestamps)
        .map(|(r, &timestamp_s)| match r {
            Recovered::Slot(s) => Ok(s),
            Recovered::Ambiguous(offset) => Err(SyncError::AmbiguousSlot {
                timestamp_s,
                offset,
            }),
            Recovered::Orphan => Err(SyncError::NoFrame { timestamp_s }),
        })
        .collect()
}

/// Largest |drift| in ppm for which a noise-free clock never places the last
/// slot of a block past the rounding boundary, leaving `jitter_margin` slots
/// of headroom.
pub fn max_tolerable_drift(params: &ProtocolParams, jitter_margin: f64) -> f64 {
    (0.5 - jitter_margin) / params.slots_per_block() as f64 * 1e6
}
