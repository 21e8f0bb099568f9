//! Shared domain types: protocol parameters, intensity classes, BB84 states
//! and the observed tally that feeds the decoy-state analysis.

use std::fmt;

use thiserror::Error;

/// One failed parameter check.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {description}")]
pub struct ViolatedInvariant {
    pub field: &'static str,
    pub description: String,
}

/// Every violation found by [`ProtocolParams::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParamErrors(pub Vec<ViolatedInvariant>);

impl fmt::Display for ParamErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid parameters: ")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Physical and protocol constants for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    /// Mean photon number of decoy pulses.
    pub mu: f64,
    /// Mean photon number of signal pulses.
    pub mu_prime: f64,
    /// Emission probabilities, indexed by [`IntensityClass::index`].
    pub class_probs: [f64; 3],
    pub pulse_rate_hz: f64,
    pub sync_rate_hz: f64,
    pub fiber_length_km: f64,
    pub atten_db_per_km: f64,
    /// Lumped insertion and connector loss.
    pub extra_loss_db: f64,
    /// Detector order is H, V, D, A.
    pub detector_efficiencies: [f64; 4],
    pub dark_rates_hz: [f64; 4],
    /// Probability a photon measured in the right basis lands on the wrong detector.
    pub misalignment_prob: f64,
    /// Multiplier of the `n / sqrt(count)` fluctuation terms.
    pub n_sigma: f64,
    pub test_fraction_phase: f64,
    pub test_fraction_bit: f64,
    pub duration_s: f64,
    pub total_pulses: u64,
    /// Error-correction inefficiency; multiplies H(E) in the key rate.
    pub ec_efficiency: f64,
}

impl Default for ProtocolParams {
    /// The 200 km, 320 MHz experiment.
    fn default() -> Self {
        Self {
            mu: 0.2,
            mu_prime: 0.6,
            class_probs: [0.25, 0.25, 0.5],
            pulse_rate_hz: 320e6,
            sync_rate_hz: 40e3,
            fiber_length_km: 200.0,
            atten_db_per_km: 0.2,
            extra_loss_db: 0.0,
            detector_efficiencies: [0.04, 0.04, 0.04, 0.03],
            dark_rates_hz: [1.0; 4],
            misalignment_prob: 0.0125,
            n_sigma: 10.0,
            test_fraction_phase: 0.1,
            test_fraction_bit: 0.05,
            duration_s: 3089.0,
            total_pulses: 988_480_000_000,
            ec_efficiency: 1.0,
        }
    }
}

fn unit_interval(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl ProtocolParams {
    /// Returns `self` if every invariant holds, otherwise the full list of
    /// violations.
    pub fn validate(self) -> Result<Self, ParamErrors> {
        let mut errs = Vec::new();
        let mut fail = |field: &'static str, description: &str| {
            errs.push(ViolatedInvariant {
                field,
                description: description.to_string(),
            })
        };

        if !(self.mu > 0.0 && self.mu.is_finite()) {
            fail("mu", "mu must be positive");
        }
        if !(self.mu < self.mu_prime && self.mu_prime.is_finite()) {
            fail("mu_prime", "mu must be < mu_prime");
        }
        if self.class_probs.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            fail("class_probs", "every class probability must be in (0, 1]");
        }
        if (self.class_probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            fail("class_probs", "probabilities must sum to 1");
        }
        if !(self.pulse_rate_hz > 0.0 && self.pulse_rate_hz.is_finite()) {
            fail("pulse_rate_hz", "must be positive");
        }
        if !(self.sync_rate_hz > 0.0 && self.sync_rate_hz <= self.pulse_rate_hz) {
            fail("sync_rate_hz", "must be positive and at most pulse_rate_hz");
        } else {
            let ratio = self.pulse_rate_hz / self.sync_rate_hz;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio {
                fail(
                    "sync_rate_hz",
                    "pulse_rate_hz must be an integer multiple of sync_rate_hz",
                );
            }
        }
        if !(self.fiber_length_km >= 0.0) {
            fail("fiber_length_km", "must be non-negative");
        }
        if !(self.atten_db_per_km >= 0.0) {
            fail("atten_db_per_km", "must be non-negative");
        }
        if !(self.extra_loss_db >= 0.0) {
            fail("extra_loss_db", "must be non-negative");
        }
        if !self.detector_efficiencies.iter().all(|&e| unit_interval(e)) {
            fail("detector_efficiencies", "each efficiency must be in [0, 1]");
        }
        if !self
            .dark_rates_hz
            .iter()
            .all(|&d| d >= 0.0 && d <= self.pulse_rate_hz)
        {
            fail("dark_rates_hz", "each dark rate must be in [0, pulse_rate_hz]");
        }
        if !unit_interval(self.misalignment_prob) {
            fail("misalignment_prob", "must be in [0, 1]");
        }
        if !(self.n_sigma >= 0.0 && self.n_sigma.is_finite()) {
            fail("n_sigma", "must be non-negative");
        }
        if !unit_interval(self.test_fraction_phase) {
            fail("test_fraction_phase", "must be in [0, 1]");
        }
        if !unit_interval(self.test_fraction_bit) {
            fail("test_fraction_bit", "must be in [0, 1]");
        }
        if !(self.test_fraction_phase + self.test_fraction_bit < 1.0) {
            fail(
                "test_fraction_bit",
                "test_fraction_phase + test_fraction_bit must be < 1",
            );
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            fail("duration_s", "must be positive");
        }
        if !(self.ec_efficiency >= 1.0 && self.ec_efficiency.is_finite()) {
            fail("ec_efficiency", "must be >= 1");
        }

        if errs.is_empty() {
            Ok(self)
        } else {
            Err(ParamErrors(errs))
        }
    }

    /// Mean photon number emitted for `class`.
    pub fn intensity(&self, class: IntensityClass) -> f64 {
        match class {
            IntensityClass::Vacuum => 0.0,
            IntensityClass::Decoy => self.mu,
            IntensityClass::Signal => self.mu_prime,
        }
    }

    /// Pulse slots between two synchronization pulses (8000 at 320 MHz / 40 kHz).
    pub fn slots_per_block(&self) -> u64 {
        (self.pulse_rate_hz / self.sync_rate_hz).round().max(1.0) as u64
    }

    /// Pulses sent per class when `total_pulses` is split exactly by `class_probs`.
    pub fn nominal_split(&self) -> [u64; 3] {
        let n = self.total_pulses as f64;
        let vac = (n * self.class_probs[0]).round() as u64;
        let decoy = (n * self.class_probs[1]).round() as u64;
        [vac, decoy, self.total_pulses.saturating_sub(vac + decoy)]
    }
}

/// Intensity class of a pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IntensityClass {
    Vacuum,
    Decoy,
    Signal,
}

impl IntensityClass {
    pub const ALL: [IntensityClass; 3] = [Self::Vacuum, Self::Decoy, Self::Signal];

    pub fn index(self) -> usize {
        self as usize
    }

    /// One-letter code used in dump files.
    pub fn code(self) -> char {
        match self {
            Self::Vacuum => 'V',
            Self::Decoy => 'D',
            Self::Signal => 'S',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'V' => Some(Self::Vacuum),
            'D' => Some(Self::Decoy),
            'S' => Some(Self::Signal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    Rectilinear,
    Diagonal,
}

impl Basis {
    pub fn code(self) -> char {
        match self {
            Basis::Rectilinear => 'R',
            Basis::Diagonal => 'D',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'R' => Some(Basis::Rectilinear),
            'D' => Some(Basis::Diagonal),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Basis::Rectilinear => Basis::Diagonal,
            Basis::Diagonal => Basis::Rectilinear,
        }
    }
}

/// BB84 polarization state. Discriminants double as detector ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarization {
    /// Horizontal.
    H = 0,
    /// Vertical.
    V = 1,
    /// π/4.
    D = 2,
    /// 3π/4.
    A = 3,
}

impl Polarization {
    pub const ALL: [Polarization; 4] = [Self::H, Self::V, Self::D, Self::A];

    pub fn basis(self) -> Basis {
        match self {
            Self::H | Self::V => Basis::Rectilinear,
            Self::D | Self::A => Basis::Diagonal,
        }
    }

    /// Key bit carried by the state: H and D encode 0, V and A encode 1.
    pub fn bit(self) -> bool {
        matches!(self, Self::V | Self::A)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i & 3]
    }

    /// The other state of the same basis.
    pub fn flipped(self) -> Self {
        Self::from_index(self.index() ^ 1)
    }

    pub fn code(self) -> char {
        match self {
            Self::H => 'H',
            Self::V => 'V',
            Self::D => 'D',
            Self::A => 'A',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.code() == c)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TallyError {
    #[error("class {class:?}: {received} counts exceed {sent} pulses sent")]
    CountsExceedSent {
        class: IntensityClass,
        received: u64,
        sent: u64,
    },
    #[error("class {class:?}: no pulses sent")]
    NothingSent { class: IntensityClass },
    #[error("class {class:?}: QBER {qber} outside [0, 0.5]")]
    QberOutOfRange { class: IntensityClass, qber: f64 },
}

/// Observed statistics of one run: pulses sent, detections and QBER per
/// class. Construction enforces the invariants the analysis relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct Tally {
    n_sent: [u64; 3],
    c_received: [u64; 3],
    qber: [f64; 2],
    test_counts: [u64; 3],
}

impl Tally {
    /// `qber` is `[E_mu, E_mu']`.
    pub fn new(
        n_sent: [u64; 3],
        c_received: [u64; 3],
        qber: [f64; 2],
        test_counts: [u64; 3],
    ) -> Result<Self, TallyError> {
        for class in IntensityClass::ALL {
            let k = class.index();
            if n_sent[k] == 0 {
                return Err(TallyError::NothingSent { class });
            }
            if c_received[k] > n_sent[k] {
                return Err(TallyError::CountsExceedSent {
                    class,
                    received: c_received[k],
                    sent: n_sent[k],
                });
            }
        }
        for (class, q) in [IntensityClass::Decoy, IntensityClass::Signal]
            .into_iter()
            .zip(qber)
        {
            if !(0.0..=0.5).contains(&q) {
                return Err(TallyError::QberOutOfRange { class, qber: q });
            }
        }
        Ok(Self {
            n_sent,
            c_received,
            qber,
            test_counts,
        })
    }

    pub fn sent(&self, class: IntensityClass) -> u64 {
        self.n_sent[class.index()]
    }

    pub fn received(&self, class: IntensityClass) -> u64 {
        self.c_received[class.index()]
    }

    /// Counting rate `S_k = C_k / N_k`.
    pub fn counting_rate(&self, class: IntensityClass) -> f64 {
        self.received(class) as f64 / self.sent(class) as f64
    }

    /// Observed QBER; vacuum pulses have none and report 0.5.
    pub fn qber(&self, class: IntensityClass) -> f64 {
        match class {
            IntensityClass::Vacuum => 0.5,
            IntensityClass::Decoy => self.qber[0],
            IntensityClass::Signal => self.qber[1],
        }
    }

    pub fn test_count(&self, class: IntensityClass) -> u64 {
        self.test_counts[class.index()]
    }

    pub fn n_sent(&self) -> [u64; 3] {
        self.n_sent
    }

    pub fn c_received(&self) -> [u64; 3] {
        self.c_received
    }

    /// The published 200 km tally: N = 9.8848e11 split 1:1:2, counts
    /// 3263 / 77157 / 449467, QBERs as printed in the results table.
    pub fn reference_200km() -> Self {
        Self::reference_with_qber(0.0404, 0.0196)
    }

    /// The published tally with caller-chosen QBERs `(E_mu, E_mu')`.
    pub fn reference_with_qber(e_mu: f64, e_mu_prime: f64) -> Self {
        let n = ProtocolParams::default().nominal_split();
        Self::new(n, [3263, 77157, 449467], [e_mu, e_mu_prime], [0; 3])
            .expect("published tally is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_params_are_valid() {
        assert!(ProtocolParams::default().validate().is_ok());
    }

    #[test]
    fn reversed_intensities_rejected() {
        let p = ProtocolParams {
            mu: 0.6,
            mu_prime: 0.2,
            ..Default::default()
        };
        let err = p.validate().unwrap_err();
        assert!(err
            .0
            .iter()
            .any(|v| v.description == "mu must be < mu_prime"));
    }

    #[test]
    fn unnormalized_probabilities_rejected() {
        let p = ProtocolParams {
            class_probs: [0.5, 0.5, 0.1],
            ..Default::default()
        };
        let err = p.validate().unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert_eq!(err.0[0].description, "probabilities must sum to 1");
    }

    #[test]
    fn all_violations_reported() {
        let p = ProtocolParams {
            mu: 0.6,
            mu_prime: 0.2,
            class_probs: [0.5, 0.5, 0.1],
            test_fraction_phase: 0.6,
            test_fraction_bit: 0.5,
            sync_rate_hz: 33e3,
            ec_efficiency: 0.9,
            ..Default::default()
        };
        let fields: Vec<_> = p.validate().unwrap_err().0.iter().map(|v| v.field).collect();
        assert_eq!(
            fields,
            [
                "mu_prime",
                "class_probs",
                "sync_rate_hz",
                "test_fraction_bit",
                "ec_efficiency"
            ]
        );
    }

    #[test]
    fn slots_per_block_default() {
        assert_eq!(ProtocolParams::default().slots_per_block(), 8000);
    }

    #[test]
    fn reference_counting_rates() {
        let t = Tally::reference_200km();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(t.counting_rate(IntensityClass::Signal), 9.0941e-7) < 1e-4);
        assert!(rel(t.counting_rate(IntensityClass::Decoy), 3.12225e-7) < 1e-4);
        assert!(rel(t.counting_rate(IntensityClass::Vacuum), 1.32041e-8) < 1e-4);
    }

    #[test]
    fn tally_rejects_invalid() {
        let n = [100, 100, 200];
        assert!(matches!(
            Tally::new(n, [1, 101, 3], [0.0, 0.0], [0; 3]),
            Err(TallyError::CountsExceedSent { class: IntensityClass::Decoy, .. })
        ));
        assert!(matches!(
            Tally::new(n, [1, 2, 3], [0.0, 1.0], [0; 3]),
            Err(TallyError::QberOutOfRange { class: IntensityClass::Signal, .. })
        ));
        assert!(matches!(
            Tally::new([0, 1, 1], [0, 0, 0], [0.0, 0.0], [0; 3]),
            Err(TallyError::NothingSent { .. })
        ));
    }

    #[test]
    fn polarization_bases() {
        use Polarization::*;
        assert_eq!(H.basis(), Basis::Rectilinear);
        assert_eq!(V.basis(), Basis::Rectilinear);
        assert_eq!(D.basis(), Basis::Diagonal);
        assert_eq!(A.basis(), Basis::Diagonal);
        assert_eq!(H.flipped(), V);
        assert_eq!(A.flipped(), D);
    }
}
