//! Three-intensity decoy-state key-rate analysis with n-sigma finite-size
//! corrections.
//!
//! Pipeline: vacuum bounds on `s0` -> QBER upper bounds -> tight lower bound
//! on the single-photon counting rate from the joint constraints (one branch
//! per key-generating class) -> single-photon fraction and QBER -> key rate
//! per pulse -> final key count.

use thiserror::Error;

use crate::model::{IntensityClass, ProtocolParams, Tally};
use crate::photon::multi_photon_tail;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("{quantity} = {value} outside its domain")]
    Domain { quantity: &'static str, value: f64 },
    #[error("empty QBER test set (C * L_p = 0)")]
    EmptyTestSet,
    #[error("no vacuum detections; the dark-count rate cannot be bounded")]
    ZeroVacuumCounts,
    #[error("no single-photon counting rate satisfies the decoy constraints")]
    Infeasible,
    #[error("vacuum contribution exceeds the decoy counting rate; s_c < 0 for every s1")]
    NegativeSc,
    #[error("single-photon fraction is zero")]
    ZeroDelta,
}

/// A value forced into its declared range, keeping the unclamped original.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped {
    pub value: f64,
    pub raw: f64,
}

impl Clamped {
    fn new(raw: f64, lo: f64, hi: f64) -> Self {
        Self {
            value: raw.clamp(lo, hi),
            raw,
        }
    }

    pub fn was_clamped(&self) -> bool {
        self.value != self.raw
    }
}

/// Shannon entropy of a Bernoulli(`x`) variable, in bits.
pub fn binary_entropy(x: f64) -> Result<f64, AnalysisError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(AnalysisError::Domain {
            quantity: "H(x) argument",
            value: x,
        });
    }
    if x == 0.0 || x == 1.0 {
        return Ok(0.0);
    }
    Ok(-x * x.log2() - (1.0 - x) * (1.0 - x).log2())
}

/// `E + n_sigma * sqrt(E / (C * L_p))`.
pub fn qber_upper_bound(e: f64, count: f64, l_p: f64, n_sigma: f64) -> Result<f64, AnalysisError> {
    if !(e >= 0.0) {
        return Err(AnalysisError::Domain {
            quantity: "QBER",
            value: e,
        });
    }
    let tests = count * l_p;
    if !(tests > 0.0) {
        return Err(AnalysisError::EmptyTestSet);
    }
    Ok(e + n_sigma * (e / tests).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VacuumBounds {
    pub r0: f64,
    pub s0_low: f64,
    pub s0_high: f64,
}

/// `r0 = n_sigma / sqrt(S0 N0)`, `s0 in [(1 - r0) S0, (1 + r0) S0]`.
pub fn vacuum_bounds(s0: f64, n0: f64, n_sigma: f64) -> Result<VacuumBounds, AnalysisError> {
    let counts = s0 * n0;
    if !(counts > 0.0) {
        return Err(AnalysisError::ZeroVacuumCounts);
    }
    let r0 = n_sigma / counts.sqrt();
    Ok(VacuumBounds {
        r0,
        s0_low: ((1.0 - r0) * s0).max(0.0),
        s0_high: (1.0 + r0) * s0,
    })
}

/// `(1 - x)` with `x = n_sigma / sqrt(counts)`, floored at 0.
fn shrink(n_sigma: f64, counts: f64) -> f64 {
    if n_sigma == 0.0 {
        1.0
    } else if counts > 0.0 {
        (1.0 - n_sigma / counts.sqrt()).max(0.0)
    } else {
        0.0
    }
}

/// The joint constraints on the single-photon counting rate for one choice
/// of vacuum rates.
///
/// Equality (decoy pulses): `S_mu = e^-mu s0 + mu e^-mu s1 + c s_c`.
/// Inequality (signal pulses):
/// `c s_c' <= (mu^2 e^-mu / mu'^2 e^-mu') (S_mu' - mu' e^-mu' s1' - e^-mu' s0')`
/// with `s1' = (1 - n e^(mu/2) / sqrt(mu s1 N_mu)) s1` and
/// `s_c' = (1 - n / sqrt(s_c N_mu)) s_c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoyConstraint {
    pub mu: f64,
    pub mu_prime: f64,
    pub s_mu: f64,
    pub s_mu_prime: f64,
    pub n_mu: f64,
    pub n_sigma: f64,
    /// Vacuum rate in the equality.
    pub s0_equality: f64,
    /// Vacuum rate in the inequality.
    pub s0_prime: f64,
    c: f64,
}

impl DecoyConstraint {
    pub fn new(tally: &Tally, params: &ProtocolParams, s0_equality: f64, s0_prime: f64) -> Result<Self, AnalysisError> {
        let c = multi_photon_tail(params.mu).map_err(|e| AnalysisError::Domain {
            quantity: "mu",
            value: e.0,
        })?;
        if !(params.mu > 0.0 && params.mu < params.mu_prime) {
            return Err(AnalysisError::Domain {
                quantity: "mu",
                value: params.mu,
            });
        }
        Ok(Self {
            mu: params.mu,
            mu_prime: params.mu_prime,
            s_mu: tally.counting_rate(IntensityClass::Decoy),
            s_mu_prime: tally.counting_rate(IntensityClass::Signal),
            n_mu: tally.sent(IntensityClass::Decoy) as f64,
            n_sigma: params.n_sigma,
            s0_equality,
            s0_prime,
            c,
        })
    }

    /// `c = 1 - e^-mu - mu e^-mu`.
    pub fn c(&self) -> f64 {
        self.c
    }

    /// `s_c` eliminated through the equality.
    pub fn s_c(&self, s1: f64) -> f64 {
        let e = (-self.mu).exp();
        (self.s_mu - e * self.s0_equality - self.mu * e * s1) / self.c
    }

    pub fn s_c_prime(&self, s1: f64) -> f64 {
        let sc = self.s_c(s1);
        shrink(self.n_sigma, sc * self.n_mu) * sc
    }

    pub fn s1_prime(&self, s1: f64) -> f64 {
        let factor = if self.n_sigma == 0.0 {
            1.0
        } else {
            let counts = self.mu * s1 * self.n_mu;
            if counts > 0.0 {
                (1.0 - self.n_sigma * (self.mu / 2.0).exp() / counts.sqrt()).max(0.0)
            } else {
                0.0
            }
        };
        factor * s1
    }

    pub fn lhs(&self, s1: f64) -> f64 {
        self.c * self.s_c_prime(s1)
    }

    pub fn rhs(&self, s1: f64) -> f64 {
        let (mu, mp) = (self.mu, self.mu_prime);
        let ratio = mu * mu * (-mu).exp() / (mp * mp * (-mp).exp());
        ratio * (self.s_mu_prime - mp * (-mp).exp() * self.s1_prime(s1) - (-mp).exp() * self.s0_prime)
    }

    /// `rhs - lhs`; the constraint holds where this is non-negative.
    pub fn residual(&self, s1: f64) -> f64 {
        self.rhs(s1) - self.lhs(s1)
    }

    /// Largest `s1` keeping `s_c >= 0`.
    pub fn s1_max(&self) -> f64 {
        let e = (-self.mu).exp();
        (self.s_mu - e * self.s0_equality) / (self.mu * e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinglePhotonSolution {
    pub s1: f64,
    /// Fluctuation-reduced `s1'` at the solution.
    pub s1_prime: f64,
    pub s_c: f64,
    pub iterations: u32,
    /// Constraint residual at the solution, relative to the left-hand side.
    pub relative_residual: f64,
}

const BRACKET_POINTS: u32 = 256;
const MAX_ITERATIONS: u32 = 200;
const REL_TOL: f64 = 1e-12;

/// Smallest `s1 >= 0` satisfying the joint constraints.
///
/// A coarse scan finds the first feasible cell of `[0, s1_max]`, then
/// bisection on the sign of the residual narrows it to `REL_TOL`. The
/// returned point is always on the feasible side.
pub fn solve_single_photon(
    tally: &Tally,
    params: &ProtocolParams,
    s0_equality: f64,
    s0_prime: f64,
) -> Result<SinglePhotonSolution, AnalysisError> {
    let sys = DecoyConstraint::new(tally, params, s0_equality, s0_prime)?;
    sys.solve()
}

impl DecoyConstraint {
    pub fn solve(&self) -> Result<SinglePhotonSolution, AnalysisError> {
        let top = self.s1_max();
        if top < 0.0 {
            return Err(AnalysisError::NegativeSc);
        }
        let finish = |s1: f64, iterations: u32| {
            let lhs = self.lhs(s1);
            let residual = self.residual(s1);
            SinglePhotonSolution {
                s1,
                s1_prime: self.s1_prime(s1),
                s_c: self.s_c(s1).max(0.0),
                iterations,
                relative_residual: if lhs != 0.0 { residual / lhs } else { residual },
            }
        };
        if self.residual(0.0) >= 0.0 {
            return Ok(finish(0.0, 0));
        }
        let cell = (1..=BRACKET_POINTS)
            .find(|&j| self.residual(top * f64::from(j) / f64::from(BRACKET_POINTS)) >= 0.0)
            .ok_or(AnalysisError::Infeasible)?;
        let mut lo = top * f64::from(cell - 1) / f64::from(BRACKET_POINTS);
        let mut hi = top * f64::from(cell) / f64::from(BRACKET_POINTS);
        let mut iterations = 0;
        while iterations < MAX_ITERATIONS && hi - lo > REL_TOL * hi {
            let mid = 0.5 * (lo + hi);
            if self.residual(mid) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            iterations += 1;
        }
        Ok(finish(hi, iterations))
    }
}

/// `Delta_1 = s1 mu e^-mu / S`, clamped to `[0, 1]`.
pub fn single_photon_fraction(s1: f64, mu: f64, s: f64) -> Result<Clamped, AnalysisError> {
    if !(s > 0.0) {
        return Err(AnalysisError::Domain {
            quantity: "counting rate",
            value: s,
        });
    }
    Ok(Clamped::new(s1 * mu * (-mu).exp() / s, 0.0, 1.0))
}

/// `E_1 = (E^U - s0_low e^-mu / (2 S)) / Delta_1`, clamped to `[0, 0.5]`.
pub fn single_photon_qber(
    e_upper: f64,
    s0_low: f64,
    mu: f64,
    s: f64,
    delta1: f64,
) -> Result<Clamped, AnalysisError> {
    if !(delta1 > 0.0) {
        return Err(AnalysisError::ZeroDelta);
    }
    let raw = (e_upper - s0_low * (-mu).exp() / (2.0 * s)) / delta1;
    Ok(Clamped::new(raw, 0.0, 0.5))
}

/// `R = S [Delta_1 - f H(E) - Delta_1 H(E_1)]`, clamped at 0.
pub fn key_rate(s: f64, delta1: f64, e: f64, e1: f64, ec_efficiency: f64) -> Result<Clamped, AnalysisError> {
    let raw = s * (delta1 - ec_efficiency * binary_entropy(e)? - delta1 * binary_entropy(e1)?);
    Ok(Clamped::new(raw, 0.0, f64::INFINITY))
}

/// `K = ½ (1 - L_p - L_b) R N`.
pub fn final_key(r: f64, n_class: f64, l_p: f64, l_b: f64) -> f64 {
    0.5 * (1.0 - l_p - l_b) * r * n_class
}

/// Intermediate bounds of the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SecurityBounds {
    pub r0: f64,
    pub s0_low: f64,
    pub s0_high: f64,
    pub e_upper_mu: f64,
    pub e_upper_mu_prime: f64,
    /// Single-photon counting rate from the decoy branch.
    pub s1: f64,
    /// Fluctuation-reduced single-photon counting rate from the signal branch.
    pub s1_prime: f64,
    /// Multi-photon counting rate at the decoy-branch solution.
    pub s_c: f64,
    pub delta1_mu: f64,
    pub delta1_mu_prime: f64,
    pub e1_mu: f64,
    pub e1_mu_prime: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SecurityReport {
    pub r_mu_prime: f64,
    pub r_mu: f64,
    pub k_mu_prime: f64,
    pub k_mu: f64,
    pub rate_mu_prime_hz: f64,
    pub rate_mu_hz: f64,
    pub rate_total_hz: f64,
}

/// Anything the analysis clamped, zeroed or could not compute.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    Clamped { quantity: &'static str, raw: f64 },
    /// A branch produced no key; the reason is the failing step.
    BranchFailed { class: IntensityClass, error: AnalysisError },
}

/// Solver statistics of one branch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BranchSolver {
    pub iterations: u32,
    pub relative_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Analysis {
    pub bounds: SecurityBounds,
    pub report: SecurityReport,
    /// `[decoy branch, signal branch]`.
    pub solver: [BranchSolver; 2],
    pub diagnostics: Vec<Diagnostic>,
}

impl Analysis {
    pub fn flagged(&self) -> bool {
        !self.diagnostics.is_empty()
    }
}

struct Branch {
    s1: f64,
    delta1: f64,
    e1: f64,
    r: f64,
    solver: BranchSolver,
}

/// Runs the whole chain for both key-generating classes.
///
/// The signal-class bound uses the two-step worst case, `(1 + r0) S0` in the
/// equality and `(1 - r0) S0` in the inequality. The decoy class uses
/// `(1 - r0) S0` in both, the tighter single-value choice for the vacuum
/// rate. Fluctuation or infeasibility in one branch zeroes that class's key
/// and records a diagnostic; vacuum and test-set errors abort.
pub fn analyze(tally: &Tally, params: &ProtocolParams) -> Result<Analysis, AnalysisError> {
    let s0 = tally.counting_rate(IntensityClass::Vacuum);
    let vb = vacuum_bounds(s0, tally.sent(IntensityClass::Vacuum) as f64, params.n_sigma)?;
    let l_p = params.test_fraction_phase;
    let l_b = params.test_fraction_bit;
    let e_upper = |class| {
        qber_upper_bound(tally.qber(class), tally.received(class) as f64, l_p, params.n_sigma)
    };
    let e_upper_mu = e_upper(IntensityClass::Decoy)?;
    let e_upper_mu_prime = e_upper(IntensityClass::Signal)?;

    let mut out = Analysis::default();
    let clamp = |quantity: &'static str, c: Clamped, diags: &mut Vec<Diagnostic>| {
        if c.was_clamped() {
            diags.push(Diagnostic::Clamped { quantity, raw: c.raw });
        }
        c.value
    };

    let run = |class: IntensityClass,
                   s0_equality: f64,
                   e_upper: f64,
                   diags: &mut Vec<Diagnostic>|
     -> Result<Branch, AnalysisError> {
        let sol = solve_single_photon(tally, params, s0_equality, vb.s0_low)?;
        let (name_d, name_e, name_r) = match class {
            IntensityClass::Signal => ("delta1_mu_prime", "e1_mu_prime", "R_mu_prime"),
            _ => ("delta1_mu", "e1_mu", "R_mu"),
        };
        // The signal class counts only the fluctuation-reduced s1'.
        let s1 = match class {
            IntensityClass::Signal => sol.s1_prime,
            _ => sol.s1,
        };
        let mu = params.intensity(class);
        let s = tally.counting_rate(class);
        let delta1 = clamp(name_d, single_photon_fraction(s1, mu, s)?, diags);
        let e1 = clamp(name_e, single_photon_qber(e_upper, vb.s0_low, mu, s, delta1)?, diags);
        let scale = params.ec_efficiency;
        let r = clamp(name_r, key_rate(s, delta1, tally.qber(class), e1, scale)?, diags);
        Ok(Branch {
            s1,
            delta1,
            e1,
            r,
            solver: BranchSolver {
                iterations: sol.iterations,
                relative_residual: sol.relative_residual,
            },
        })
    };

    let mut diags = Vec::new();
    let decoy = run(IntensityClass::Decoy, vb.s0_low, e_upper_mu, &mut diags);
    let signal = run(IntensityClass::Signal, vb.s0_high, e_upper_mu_prime, &mut diags);

    out.bounds = SecurityBounds {
        r0: vb.r0,
        s0_low: vb.s0_low,
        s0_high: vb.s0_high,
        e_upper_mu,
        e_upper_mu_prime,
        ..Default::default()
    };
    for (class, branch) in [(IntensityClass::Decoy, decoy), (IntensityClass::Signal, signal)] {
        let b = match branch {
            Ok(b) => b,
            Err(error) => {
                diags.push(Diagnostic::BranchFailed { class, error });
                continue;
            }
        };
        let n = tally.sent(class) as f64;
        let k = final_key(b.r, n, l_p, l_b);
        match class {
            IntensityClass::Signal => {
                out.bounds.s1_prime = b.s1;
                out.bounds.delta1_mu_prime = b.delta1;
                out.bounds.e1_mu_prime = b.e1;
                out.report.r_mu_prime = b.r;
                out.report.k_mu_prime = k;
                out.solver[1] = b.solver;
            }
            _ => {
                out.bounds.s1 = b.s1;
                out.bounds.delta1_mu = b.delta1;
                out.bounds.e1_mu = b.e1;
                out.report.r_mu = b.r;
                out.report.k_mu = k;
                out.solver[0] = b.solver;
            }
        }
    }
    if let Ok(sol) = solve_single_photon(tally, params, vb.s0_low, vb.s0_low) {
        out.bounds.s_c = sol.s_c;
    }
    let t = params.duration_s;
    out.report.rate_mu_hz = out.report.k_mu / t;
    out.report.rate_mu_prime_hz = out.report.k_mu_prime / t;
    out.report.rate_total_hz = out.report.rate_mu_hz + out.report.rate_mu_prime_hz;
    out.diagnostics = diags;
    Ok(out)
}
