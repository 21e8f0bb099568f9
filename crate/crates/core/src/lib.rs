//! Simulation and finite-size security analysis of three-intensity
//! (vacuum, decoy, signal) decoy-state BB84 over a lossy fiber link.
//!
//! The simulator covers Alice's pulse source, the fiber and Bob's passive
//! four-detector receiver, block-wise clock synchronization and sifting. The
//! analyzer turns a [`Tally`] of sent pulses, detections and error rates into
//! single-photon bounds and a secure key length.

// Validation uses `!(x >= lo)` on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod channel;
pub mod io;
pub mod model;
pub mod photon;
pub mod pipeline;
pub mod rng;
pub mod sifting;
pub mod source;
pub mod sync;

pub use analysis::{analyze, Analysis, AnalysisError, SecurityBounds, SecurityReport};
pub use channel::{calibrate_channel, Calibration, ChannelModel};
pub use model::{Basis, IntensityClass, ParamErrors, Polarization, ProtocolParams, Tally};
pub use pipeline::{simulate, Mode, SimulationConfig, SimulationOutput};
pub use sync::ClockModel;
