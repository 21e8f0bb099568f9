//! Basis reconciliation, test-bit sampling and tally construction.

use rand::Rng;
use thiserror::Error;

use crate::channel::{AggregateCounts, DetectionRecord};
use crate::model::{IntensityClass, Tally, TallyError};
use crate::source::PulsePlan;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SiftError {
    #[error("detection references slot {0}, which has no pulse plan")]
    UnknownSlot(u64),
    #[error("class {0:?} has no test bits to estimate its QBER")]
    EmptyTestSet(IntensityClass),
    #[error(transparent)]
    Tally(#[from] TallyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    KeyCandidate,
    PhaseTest,
    BitTest,
}

/// A basis-matched detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiftedBit {
    pub slot_index: u64,
    pub class: IntensityClass,
    /// `None` for vacuum pulses, whose clicks are darks.
    pub alice_bit: Option<bool>,
    pub bob_bit: bool,
    pub role: Role,
}

impl SiftedBit {
    pub fn is_error(&self) -> bool {
        self.alice_bit.is_some_and(|a| a != self.bob_bit)
    }
}

/// Detections (clicks only) per class, irrespective of basis.
pub fn detections_per_class(
    plans: &[PulsePlan],
    detections: &[DetectionRecord],
) -> Result<[u64; 3], SiftError> {
    let mut out = [0u64; 3];
    for d in detections.iter().filter(|d| d.outcome.detector().is_some()) {
        out[lookup(plans, d.slot_index)?.class().index()] += 1;
    }
    Ok(out)
}

fn lookup(plans: &[PulsePlan], slot: u64) -> Result<&PulsePlan, SiftError> {
    // Plans are generated in ascending slot order; contiguous runs index directly.
    if let Some(first) = plans.first() {
        if let Some(p) = slot
            .checked_sub(first.slot_index())
            .and_then(|i| plans.get(i as usize))
        {
            if p.slot_index() == slot {
                return Ok(p);
            }
        }
    }
    plans
        .binary_search_by_key(&slot, |p| p.slot_index())
        .map(|i| &plans[i])
        .map_err(|_| SiftError::UnknownSlot(slot))
}

/// Keeps detections whose basis matches the pulse's basis; vacuum-pulse
/// detections are kept regardless. `plans` must be sorted by slot index.
pub fn sift(plans: &[PulsePlan], detections: &[DetectionRecord]) -> Result<Vec<SiftedBit>, SiftError> {
    let mut out = Vec::new();
    for d in detections {
        let Some(state) = d.detected_state() else {
            continue;
        };
        let plan = lookup(plans, d.slot_index)?;
        let keep = match plan.polarization() {
            None => true,
            Some(pol) => pol.basis() == state.basis(),
        };
        if keep {
            out.push(SiftedBit {
                slot_index: d.slot_index,
                class: plan.class(),
                alice_bit: plan.polarization().map(|p| p.bit()),
                bob_bit: state.bit(),
                role: Role::KeyCandidate,
            });
        }
    }
    Ok(out)
}

/// Disjoint role subsets of the sifted bits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TestPartition {
    pub phase_test: Vec<SiftedBit>,
    pub bit_test: Vec<SiftedBit>,
    pub key: Vec<SiftedBit>,
}

impl TestPartition {
    pub fn all(&self) -> impl Iterator<Item = &SiftedBit> {
        self.phase_test.iter().chain(&self.bit_test).chain(&self.key)
    }
}

/// Each bit independently becomes a phase-test bit with probability `l_p`,
/// a bit-test bit with probability `l_b`, otherwise a key candidate.
pub fn sample_test_bits<R: Rng + ?Sized>(
    sifted: Vec<SiftedBit>,
    l_p: f64,
    l_b: f64,
    rng: &mut R,
) -> TestPartition {
    let mut out = TestPartition::default();
    for mut bit in sifted {
        let u: f64 = rng.random();
        if u < l_p {
            bit.role = Role::PhaseTest;
            out.phase_test.push(bit);
        } else if u < l_p + l_b {
            bit.role = Role::BitTest;
            out.bit_test.push(bit);
        } else {
            bit.role = Role::KeyCandidate;
            out.key.push(bit);
        }
    }
    out
}

/// Which sifted bits estimate a class's QBER.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QberSource {
    /// Every sifted bit of the class.
    AllBits,
    /// Only the phase-test subset.
    PhaseTest,
}

/// QBER estimation policy: decoy from all decoy bits, signal from its
/// phase-test fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QberPolicy {
    pub decoy: QberSource,
    pub signal: QberSource,
}

impl Default for QberPolicy {
    fn default() -> Self {
        Self {
            decoy: QberSource::AllBits,
            signal: QberSource::PhaseTest,
        }
    }
}

impl QberPolicy {
    fn source(&self, class: IntensityClass) -> QberSource {
        match class {
            IntensityClass::Signal => self.signal,
            _ => self.decoy,
        }
    }
}

fn build_tally(
    n_sent: [u64; 3],
    c_received: [u64; 3],
    errors_and_sizes: [(u64, u64); 2],
) -> Result<Tally, SiftError> {
    let mut qber = [0.0; 2];
    let mut test_counts = [0u64; 3];
    for (i, class) in [IntensityClass::Decoy, IntensityClass::Signal].into_iter().enumerate() {
        let (errors, size) = errors_and_sizes[i];
        if size == 0 {
            return Err(SiftError::EmptyTestSet(class));
        }
        qber[i] = errors as f64 / size as f64;
        test_counts[class.index()] = size;
    }
    Ok(Tally::new(n_sent, c_received, qber, test_counts)?)
}

/// Builds the tally: `N_k` from `n_sent`, `C_k` from all detections of the
/// class, `E_k` from the bits selected by `policy`.
pub fn tally(
    partition: &TestPartition,
    n_sent: [u64; 3],
    c_received: [u64; 3],
    policy: QberPolicy,
) -> Result<Tally, SiftError> {
    let stats = [IntensityClass::Decoy, IntensityClass::Signal].map(|class| {
        let bits: Box<dyn Iterator<Item = &SiftedBit>> = match policy.source(class) {
            QberSource::AllBits => Box::new(partition.all()),
            QberSource::PhaseTest => Box::new(partition.phase_test.iter()),
        };
        bits.filter(|b| b.class == class)
            .fold((0u64, 0u64), |(e, n), b| (e + b.is_error() as u64, n + 1))
    });
    build_tally(n_sent, c_received, stats)
}

/// Tally from aggregate-mode counts under the same policy.
pub fn tally_from_aggregate(counts: &AggregateCounts, policy: QberPolicy) -> Result<Tally, SiftError> {
    let n_sent = counts.sampled.map(|c| c.sent);
    let c_received = counts.sampled.map(|c| c.clicks);
    let stats = [IntensityClass::Decoy, IntensityClass::Signal].map(|class| {
        let c = counts.class(class);
        match policy.source(class) {
            QberSource::AllBits => (c.errors, c.sifted),
            QberSource::PhaseTest => (c.phase_test_errors, c.phase_test),
        }
    });
    build_tally(n_sent, c_received, stats)
}
