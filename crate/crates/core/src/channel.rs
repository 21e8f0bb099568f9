//! Fiber channel and Bob's passive four-detector BB84 receiver.
//!
//! A beam splitter sends the pulse into the rectilinear or diagonal analyzer
//! with probability ½ each. In the analyzer matching the pulse's basis the
//! light reaches the correct detector with probability `1 - e_mis` and the
//! other one with `e_mis`; in the conjugate analyzer it splits ½/½. Detector
//! `i` clicks on light with probability `1 - exp(-I * eta_i * route_i)` and
//! independently dark-counts with probability `dark_rate_i / f` per slot.
//! Multiple clicks are resolved to one uniformly chosen detector.
//!
//! All outcome probabilities are obtained by enumerating the 2 analyzer
//! choices and the 16 click subsets, so the analytic branch is exact and the
//! per-pulse sampler draws from the same table.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Hypergeometric};
use thiserror::Error;

use crate::model::{Basis, IntensityClass, Polarization, ProtocolParams, Tally};
use crate::source::PulsePlan;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("transmittance {0} outside (0, 1]")]
    Transmittance(f64),
    #[error("misalignment probability {0} outside [0, 0.5]")]
    Misalignment(f64),
    #[error("{0} pulses exceed the representable count range")]
    Overflow(u64),
    #[error("no channel reproduces the tally: {0}")]
    NoSolution(String),
}

/// End-to-end optical channel between Alice's output and Bob's detector inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    transmittance: f64,
    misalignment_prob: f64,
}

impl ChannelModel {
    pub fn new(transmittance: f64, misalignment_prob: f64) -> Result<Self, ChannelError> {
        if !(transmittance > 0.0 && transmittance <= 1.0) {
            return Err(ChannelError::Transmittance(transmittance));
        }
        if !(0.0..=0.5).contains(&misalignment_prob) {
            return Err(ChannelError::Misalignment(misalignment_prob));
        }
        Ok(Self {
            transmittance,
            misalignment_prob,
        })
    }

    /// Fiber loss `L * alpha` plus the lumped extra loss.
    pub fn from_params(params: &ProtocolParams) -> Result<Self, ChannelError> {
        Self::new(
            fiber_transmittance(params),
            params.misalignment_prob,
        )
    }

    pub fn transmittance(&self) -> f64 {
        self.transmittance
    }

    pub fn misalignment_prob(&self) -> f64 {
        self.misalignment_prob
    }

    /// Total loss in dB.
    pub fn loss_db(&self) -> f64 {
        -10.0 * self.transmittance.log10()
    }
}

fn fiber_transmittance(params: &ProtocolParams) -> f64 {
    10f64.powf(-(params.fiber_length_km * params.atten_db_per_km + params.extra_loss_db) / 10.0)
}

/// Overall efficiency `eta_i` of each detector (channel loss times quantum efficiency).
pub fn system_transmittance(params: &ProtocolParams) -> [f64; 4] {
    let t = fiber_transmittance(params);
    params.detector_efficiencies.map(|e| t * e)
}

/// Result of one pulse slot at Bob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    NoClick,
    /// Exactly one detector fired; ids follow [`Polarization`] discriminants.
    Click(u8),
    /// Several detectors fired; the id is the randomly resolved one.
    DoubleClick(u8),
}

impl Outcome {
    pub fn detector(self) -> Option<u8> {
        match self {
            Outcome::NoClick => None,
            Outcome::Click(d) | Outcome::DoubleClick(d) => Some(d),
        }
    }
}

/// Bob's record for one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRecord {
    pub slot_index: u64,
    /// Basis of the analyzer that produced the (resolved) click; for
    /// `NoClick` slots, the analyzer the beam splitter chose.
    pub basis_chosen: Basis,
    pub outcome: Outcome,
    /// Filled in by the synchronizer; 0 until then.
    pub timestamp_s: f64,
}

impl DetectionRecord {
    /// The state the clicking detector stands for.
    pub fn detected_state(&self) -> Option<Polarization> {
        self.outcome
            .detector()
            .map(|d| Polarization::from_index(d as usize))
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    prob: f64,
    detector: u8,
    multi: bool,
}

/// Joint outcome distribution for one kind of pulse.
#[derive(Debug, Clone)]
pub struct OutcomeTable {
    no_click: f64,
    click: f64,
    entries: Vec<Entry>,
    /// Running sum of `entries[..=i].prob`.
    cumulative: Vec<f64>,
}

impl OutcomeTable {
    fn build(
        intensity: f64,
        state: Option<Polarization>,
        eta: &[f64; 4],
        dark: &[f64; 4],
        e_mis: f64,
    ) -> Self {
        let mut entries = Vec::with_capacity(64);
        let mut no_click = 0.0;
        for analyzer in [Basis::Rectilinear, Basis::Diagonal] {
            let mut route = [0.0; 4];
            if let Some(pol) = state {
                let (first, second) = match analyzer {
                    Basis::Rectilinear => (0usize, 1usize),
                    Basis::Diagonal => (2, 3),
                };
                if pol.basis() == analyzer {
                    route[pol.index()] = 1.0 - e_mis;
                    route[pol.flipped().index()] = e_mis;
                } else {
                    route[first] = 0.5;
                    route[second] = 0.5;
                }
            }
            let mut fire = [0.0; 4];
            let mut silent = [0.0; 4];
            for i in 0..4 {
                let x = intensity * eta[i] * route[i];
                // 1 - (1 - d) e^-x, written to keep precision at tiny x and d.
                silent[i] = (1.0 - dark[i]) * (-x).exp();
                fire[i] = dark[i] - (1.0 - dark[i]) * (-x).exp_m1();
            }
            no_click += 0.5 * silent.iter().product::<f64>();
            for subset in 1u8..16 {
                let mut p = 0.5;
                for i in 0..4 {
                    p *= if subset & (1 << i) != 0 { fire[i] } else { silent[i] };
                }
                let size = subset.count_ones();
                for d in 0..4u8 {
                    if subset & (1 << d) != 0 {
                        entries.push(Entry {
                            prob: p / f64::from(size),
                            detector: d,
                            multi: size > 1,
                        });
                    }
                }
            }
        }
        let mut acc = 0.0;
        let cumulative = entries
            .iter()
            .map(|e| {
                acc += e.prob;
                acc
            })
            .collect();
        Self {
            no_click,
            click: acc,
            entries,
            cumulative,
        }
    }

    pub fn no_click_prob(&self) -> f64 {
        self.no_click
    }

    /// Probability that at least one detector fires.
    pub fn click_prob(&self) -> f64 {
        self.click
    }

    /// Probability that the resolved click is on `detector`.
    pub fn detector_prob(&self, detector: u8) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.detector == detector)
            .map(|e| e.prob)
            .sum()
    }

    pub fn double_click_prob(&self) -> f64 {
        self.entries.iter().filter(|e| e.multi).map(|e| e.prob).sum()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Basis, Outcome) {
        let u: f64 = rng.random();
        if u >= self.click {
            let analyzer = if rng.random::<bool>() {
                Basis::Diagonal
            } else {
                Basis::Rectilinear
            };
            return (analyzer, Outcome::NoClick);
        }
        let i = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.entries.len() - 1);
        let e = self.entries[i];
        let outcome = if e.multi {
            Outcome::DoubleClick(e.detector)
        } else {
            Outcome::Click(e.detector)
        };
        // Dark counts can fire the analyzer the photon did not enter; Bob
        // only sees which detector clicked.
        (Polarization::from_index(e.detector as usize).basis(), outcome)
    }
}

/// Per-class analytic statistics, averaged over the four states of the class.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassStatistics {
    /// Probability of any detection per pulse (the counting rate S).
    pub click: f64,
    /// Probability the resolved detection lies in the pulse's own basis.
    /// Vacuum pulses have no basis; every detection is kept.
    pub sifted: f64,
    /// Probability of a sifted detection on the wrong detector.
    pub sifted_error: f64,
}

impl ClassStatistics {
    /// Expected QBER of sifted bits.
    pub fn qber(&self) -> f64 {
        if self.sifted > 0.0 {
            self.sifted_error / self.sifted
        } else {
            0.0
        }
    }
}

/// Bob's detection unit with precomputed outcome tables.
#[derive(Debug, Clone)]
pub struct Receiver {
    vacuum: OutcomeTable,
    /// `[decoy, signal][polarization]`.
    lit: [[OutcomeTable; 4]; 2],
    stats: [ClassStatistics; 3],
}

impl Receiver {
    pub fn new(channel: &ChannelModel, params: &ProtocolParams) -> Self {
        let eta = params.detector_efficiencies.map(|e| e * channel.transmittance);
        let dark = params.dark_rates_hz.map(|d| d / params.pulse_rate_hz);
        let e = channel.misalignment_prob;
        let vacuum = OutcomeTable::build(0.0, None, &eta, &dark, e);
        let lit = [IntensityClass::Decoy, IntensityClass::Signal].map(|class| {
            Polarization::ALL
                .map(|pol| OutcomeTable::build(params.intensity(class), Some(pol), &eta, &dark, e))
        });

        let mut stats = [ClassStatistics::default(); 3];
        stats[0] = ClassStatistics {
            click: vacuum.click_prob(),
            sifted: vacuum.click_prob(),
            sifted_error: 0.0,
        };
        for (k, tables) in lit.iter().enumerate() {
            let mut s = ClassStatistics::default();
            for pol in Polarization::ALL {
                let t = &tables[pol.index()];
                let right = t.detector_prob(pol.index() as u8);
                let wrong = t.detector_prob(pol.flipped().index() as u8);
                s.click += 0.25 * t.click_prob();
                s.sifted += 0.25 * (right + wrong);
                s.sifted_error += 0.25 * wrong;
            }
            stats[k + 1] = s;
        }
        Self { vacuum, lit, stats }
    }

    pub fn table(&self, class: IntensityClass, pol: Option<Polarization>) -> &OutcomeTable {
        match (class, pol) {
            (IntensityClass::Vacuum, _) | (_, None) => &self.vacuum,
            (IntensityClass::Decoy, Some(p)) => &self.lit[0][p.index()],
            (IntensityClass::Signal, Some(p)) => &self.lit[1][p.index()],
        }
    }

    pub fn class_statistics(&self, class: IntensityClass) -> ClassStatistics {
        self.stats[class.index()]
    }

    /// Samples Bob's outcome for one pulse. The timestamp is left at 0.
    pub fn detect<R: Rng + ?Sized>(&self, plan: &PulsePlan, rng: &mut R) -> DetectionRecord {
        let (basis_chosen, outcome) = self.table(plan.class(), plan.polarization()).sample(rng);
        DetectionRecord {
            slot_index: plan.slot_index(),
            basis_chosen,
            outcome,
            timestamp_s: 0.0,
        }
    }
}

/// One-shot form of [`Receiver::detect`]; build a [`Receiver`] for loops.
pub fn detect_pulse<R: Rng + ?Sized>(
    plan: &PulsePlan,
    channel: &ChannelModel,
    params: &ProtocolParams,
    rng: &mut R,
) -> DetectionRecord {
    Receiver::new(channel, params).detect(plan, rng)
}

/// Sampled counts of one intensity class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub sent: u64,
    pub clicks: u64,
    pub sifted: u64,
    pub errors: u64,
    pub phase_test: u64,
    pub phase_test_errors: u64,
    pub bit_test: u64,
}

/// Expected values matching [`ClassCounts`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassExpectation {
    pub sent: f64,
    pub clicks: f64,
    pub sifted: f64,
    pub errors: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregateCounts {
    pub sampled: [ClassCounts; 3],
    pub expected: [ClassExpectation; 3],
}

impl AggregateCounts {
    pub fn class(&self, class: IntensityClass) -> &ClassCounts {
        &self.sampled[class.index()]
    }

    pub fn expected(&self, class: IntensityClass) -> &ClassExpectation {
        &self.expected[class.index()]
    }

    /// Merges counts from independent shards.
    pub fn merge(&mut self, other: &AggregateCounts) {
        for k in 0..3 {
            let (a, b) = (&mut self.sampled[k], &other.sampled[k]);
            a.sent += b.sent;
            a.clicks += b.clicks;
            a.sifted += b.sifted;
            a.errors += b.errors;
            a.phase_test += b.phase_test;
            a.phase_test_errors += b.phase_test_errors;
            a.bit_test += b.bit_test;
            let (a, b) = (&mut self.expected[k], &other.expected[k]);
            a.sent += b.sent;
            a.clicks += b.clicks;
            a.sifted += b.sifted;
            a.errors += b.errors;
        }
    }
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

fn hypergeometric<R: Rng + ?Sized>(total: u64, marked: u64, draws: u64, rng: &mut R) -> u64 {
    if draws == 0 || marked == 0 {
        return 0;
    }
    if marked == total {
        return draws;
    }
    Hypergeometric::new(total, marked, draws)
        .expect("valid hypergeometric")
        .sample(rng)
}

/// Draws per-class counts for `n_pulses` pulses from the analytic outcome
/// probabilities: multinomial class split, then nested binomials for clicks,
/// sifted bits and errors, and test-bit subsets without replacement.
pub fn simulate_aggregate<R: Rng + ?Sized>(
    params: &ProtocolParams,
    channel: &ChannelModel,
    n_pulses: u64,
    rng: &mut R,
) -> Result<AggregateCounts, ChannelError> {
    if n_pulses > i64::MAX as u64 {
        return Err(ChannelError::Overflow(n_pulses));
    }
    let receiver = Receiver::new(channel, params);
    let mut out = AggregateCounts::default();

    let [p0, p1, _] = params.class_probs;
    let n0 = binomial(n_pulses, p0, rng);
    let n1 = binomial(n_pulses - n0, p1 / (1.0 - p0), rng);
    let sent = [n0, n1, n_pulses - n0 - n1];

    let lp = params.test_fraction_phase;
    let lb = params.test_fraction_bit;
    for class in IntensityClass::ALL {
        let k = class.index();
        let st = receiver.class_statistics(class);
        let n = n_pulses as f64 * params.class_probs[k];
        out.expected[k] = ClassExpectation {
            sent: n,
            clicks: n * st.click,
            sifted: n * st.sifted,
            errors: n * st.sifted_error,
        };

        let clicks = binomial(sent[k], st.click, rng);
        let sifted = binomial(clicks, (st.sifted / st.click).min(1.0), rng);
        let errors = if st.sifted > 0.0 {
            binomial(sifted, (st.sifted_error / st.sifted).min(1.0), rng)
        } else {
            0
        };
        let phase_test = binomial(sifted, lp, rng);
        let phase_test_errors = hypergeometric(sifted, errors, phase_test, rng);
        let bit_test = if lp < 1.0 {
            binomial(sifted - phase_test, lb / (1.0 - lp), rng)
        } else {
            0
        };
        out.sampled[k] = ClassCounts {
            sent: sent[k],
            clicks,
            sifted,
            errors,
            phase_test,
            phase_test_errors,
            bit_test,
        };
    }
    Ok(out)
}

/// Channel fitted to an observed tally.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub channel: ChannelModel,
    /// Per-detector dark rate (all four equal) reproducing `S_0`.
    pub dark_rate_hz: f64,
    /// Mean single-photon detection probability: transmittance times mean
    /// detector efficiency.
    pub eta_sys: f64,
    /// Extra loss beyond `fiber_length_km * atten_db_per_km`; may be negative
    /// if the nominal fiber alone is too lossy.
    pub extra_loss_db: f64,
    /// Relative misfit `(model - observed) / observed` of the decoy counting rate.
    pub residual_s_mu: f64,
    /// Absolute misfit of the decoy QBER.
    pub residual_e_mu: f64,
    /// Misfit of the signal QBER; non-zero only when the target was
    /// unreachable (clamped misalignment).
    pub residual_e_mu_prime: f64,
}

impl Calibration {
    /// `params` with the fitted losses, misalignment and dark rates applied.
    pub fn apply(&self, params: &ProtocolParams) -> ProtocolParams {
        ProtocolParams {
            extra_loss_db: (self.channel.loss_db()
                - params.fiber_length_km * params.atten_db_per_km)
                .max(0.0),
            misalignment_prob: self.channel.misalignment_prob,
            dark_rates_hz: [self.dark_rate_hz; 4],
            ..params.clone()
        }
    }
}

fn bisect(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    // f(lo) < 0 <= f(hi) assumed.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Fits dark rate, transmittance and misalignment so that the model's
/// vacuum counting rate, signal counting rate and signal QBER reproduce the
/// tally. The decoy class is predicted and its misfit reported.
pub fn calibrate_channel(tally: &Tally, params: &ProtocolParams) -> Result<Calibration, ChannelError> {
    let s0 = tally.counting_rate(IntensityClass::Vacuum);
    let s_sig = tally.counting_rate(IntensityClass::Signal);
    let e_sig = tally.qber(IntensityClass::Signal);
    if s_sig <= s0 {
        return Err(ChannelError::NoSolution(format!(
            "signal counting rate {s_sig:e} does not exceed the dark floor {s0:e}"
        )));
    }
    if tally.received(IntensityClass::Decoy) == 0 || tally.received(IntensityClass::Signal) == 0 {
        return Err(ChannelError::NoSolution("no decoy or signal detections".into()));
    }

    // 1 - (1 - p)^4 = S0
    let p_dark = -((-s0).ln_1p() / 4.0).exp_m1();
    let dark_rate_hz = p_dark * params.pulse_rate_hz;
    let fit_params = ProtocolParams {
        dark_rates_hz: [dark_rate_hz; 4],
        ..params.clone()
    };
    let model = |t: f64, e: f64| {
        Receiver::new(&ChannelModel { transmittance: t, misalignment_prob: e }, &fit_params)
    };

    if model(1.0, 0.0).class_statistics(IntensityClass::Signal).click < s_sig {
        return Err(ChannelError::NoSolution(format!(
            "signal counting rate {s_sig:e} exceeds a lossless channel"
        )));
    }

    let mut t = (s_sig - s0) / params.mu_prime;
    let mut e = 0.0;
    let mut e_residual = 0.0;
    for _ in 0..50 {
        // Transmittance on a log scale: the fitted values span many decades.
        let log_t = bisect(-80.0, 0.0, |lt| {
            model(10f64.powf(lt), e).class_statistics(IntensityClass::Signal).click - s_sig
        });
        let t_new = 10f64.powf(log_t);

        let qber_at = |e: f64| model(t_new, e).class_statistics(IntensityClass::Signal).qber();
        let e_new = if qber_at(0.0) >= e_sig {
            e_residual = qber_at(0.0) - e_sig;
            0.0
        } else if qber_at(0.5) < e_sig {
            e_residual = qber_at(0.5) - e_sig;
            0.5
        } else {
            e_residual = 0.0;
            bisect(0.0, 0.5, |e| qber_at(e) - e_sig)
        };

        let done = ((t_new - t) / t).abs() < 1e-13 && (e_new - e).abs() < 1e-15;
        t = t_new;
        e = e_new;
        if done {
            break;
        }
    }

    let channel = ChannelModel::new(t, e)?;
    let decoy = model(t, e).class_statistics(IntensityClass::Decoy);
    let s_mu = tally.counting_rate(IntensityClass::Decoy);
    let mean_eff = params.detector_efficiencies.iter().sum::<f64>() / 4.0;
    Ok(Calibration {
        channel,
        dark_rate_hz,
        eta_sys: t * mean_eff,
        extra_loss_db: channel.loss_db() - params.fiber_length_km * params.atten_db_per_km,
        residual_s_mu: (decoy.click - s_mu) / s_mu,
        residual_e_mu: decoy.qber() - tally.qber(IntensityClass::Decoy),
        residual_e_mu_prime: e_residual,
    })
}
