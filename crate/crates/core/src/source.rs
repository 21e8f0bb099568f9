//! Alice's transmitter.
//!
//! Each pulse is driven by a 4-bit random number. The high two bits pick the
//! intensity class (`00` vacuum, `01` decoy, `10`/`11` signal, giving the
//! 1:1:2 mix) and the low two bits pick which of the four diodes of that
//! class fires: `00` H, `01` V, `10` D, `11` A.

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::model::{IntensityClass, Polarization, ProtocolParams};
use crate::rng::{block_rng, Stream};

/// Sender intent for one pulse slot. Vacuum pulses carry no polarization
/// and zero intensity; lit pulses carry the intensity of their class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulsePlan {
    slot_index: u64,
    class: IntensityClass,
    polarization: Option<Polarization>,
    intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("{class:?} pulse must {} a polarization", if *.class == IntensityClass::Vacuum { "not have" } else { "have" })]
    Polarization { class: IntensityClass },
    #[error("{class:?} pulse must have intensity {expected}, got {got}")]
    Intensity {
        class: IntensityClass,
        expected: f64,
        got: f64,
    },
}

impl PulsePlan {
    /// Checked construction from every field.
    pub fn from_parts(
        slot_index: u64,
        class: IntensityClass,
        polarization: Option<Polarization>,
        intensity: f64,
        params: &ProtocolParams,
    ) -> Result<Self, PlanError> {
        if polarization.is_some() == (class == IntensityClass::Vacuum) {
            return Err(PlanError::Polarization { class });
        }
        let expected = params.intensity(class);
        if intensity != expected {
            return Err(PlanError::Intensity {
                class,
                expected,
                got: intensity,
            });
        }
        Ok(Self {
            slot_index,
            class,
            polarization,
            intensity,
        })
    }

    pub fn slot_index(&self) -> u64 {
        self.slot_index
    }

    pub fn class(&self) -> IntensityClass {
        self.class
    }

    /// `None` exactly for vacuum pulses.
    pub fn polarization(&self) -> Option<Polarization> {
        self.polarization
    }

    /// Mean photon number of this pulse.
    pub fn intensity(&self) -> f64 {
        self.intensity
    }

    /// Builds a plan for an explicit class/state, upholding the vacuum rule.
    pub fn new(
        slot_index: u64,
        class: IntensityClass,
        polarization: Polarization,
        params: &ProtocolParams,
    ) -> Self {
        let polarization = match class {
            IntensityClass::Vacuum => None,
            _ => Some(polarization),
        };
        Self {
            slot_index,
            class,
            polarization,
            intensity: params.intensity(class),
        }
    }
}

/// Maps a 4-bit random number to a pulse. Bits above the low four are ignored.
pub fn encode_pulse(slot_index: u64, nibble: u8, params: &ProtocolParams) -> PulsePlan {
    let class = match (nibble >> 2) & 0b11 {
        0b00 => IntensityClass::Vacuum,
        0b01 => IntensityClass::Decoy,
        _ => IntensityClass::Signal,
    };
    PulsePlan::new(
        slot_index,
        class,
        Polarization::from_index((nibble & 0b11) as usize),
        params,
    )
}

/// Deterministic, block-addressable pulse generator.
#[derive(Debug, Clone)]
pub struct SourceStream {
    seed: u64,
    block_size: u64,
    params: ProtocolParams,
    nibble_mode: bool,
}

impl SourceStream {
    pub fn new(seed: u64, block_size: u64, params: &ProtocolParams) -> Self {
        Self {
            seed,
            block_size,
            params: params.clone(),
            nibble_mode: params.class_probs == [0.25, 0.25, 0.5],
        }
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    /// Pulses `block_index * block_size ..` of the stream.
    pub fn generate_block(&self, block_index: u64) -> Vec<PulsePlan> {
        let mut rng = block_rng(self.seed, Stream::Source, block_index);
        let start = block_index * self.block_size;
        let mut out = Vec::with_capacity(self.block_size as usize);
        if self.nibble_mode {
            // Sixteen nibbles per 64-bit draw.
            let mut word = 0u64;
            for i in 0..self.block_size {
                if i % 16 == 0 {
                    word = rng.next_u64();
                }
                let nibble = ((word >> (4 * (i % 16))) & 0xF) as u8;
                out.push(encode_pulse(start + i, nibble, &self.params));
            }
        } else {
            let [p_vac, p_decoy, _] = self.params.class_probs;
            for i in 0..self.block_size {
                let u: f64 = rng.random();
                let class = if u < p_vac {
                    IntensityClass::Vacuum
                } else if u < p_vac + p_decoy {
                    IntensityClass::Decoy
                } else {
                    IntensityClass::Signal
                };
                let pol = Polarization::from_index((rng.next_u32() & 0b11) as usize);
                out.push(PulsePlan::new(start + i, class, pol, &self.params));
            }
        }
        out
    }
}

/// Exact class and polarization counts of a pulse sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassHistogram {
    pub by_class: [u64; 3],
    /// `[class][polarization]`; the vacuum row stays zero.
    pub by_polarization: [[u64; 4]; 3],
}

impl ClassHistogram {
    pub fn total(&self) -> u64 {
        self.by_class.iter().sum()
    }
}

pub fn class_histogram<'a>(plans: impl IntoIterator<Item = &'a PulsePlan>) -> ClassHistogram {
    let mut h = ClassHistogram::default();
    for p in plans {
        let k = p.class.index();
        h.by_class[k] += 1;
        if let Some(pol) = p.polarization {
            h.by_polarization[k][pol.index()] += 1;
        }
    }
    h
}

/// One `slot_index,class,polarization` line of a pulse-plan dump.
pub fn format_plan(plan: &PulsePlan) -> String {
    format!(
        "{},{},{}",
        plan.slot_index,
        plan.class.code(),
        plan.polarization.map_or('-', Polarization::code)
    )
}
