//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use decoy_qkd::analysis::{
    analyze, binary_entropy, key_rate, vacuum_bounds, DecoyConstraint,
};
use decoy_qkd::channel::{calibrate_channel, simulate_aggregate, ChannelModel, Receiver};
use decoy_qkd::model::{IntensityClass, Polarization, ProtocolParams, Tally};
use decoy_qkd::photon::{multi_photon_tail, poisson_pmf};
use decoy_qkd::pipeline::{simulate, Mode, SimulationConfig};
use decoy_qkd::rng::{block_rng, Stream};
use decoy_qkd::source::PulsePlan;
use decoy_qkd::sync::{emit_timestamps, recover_each, recover_indices, ClockModel, Recovered};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_abs(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    check(
        (got - want).abs() <= tol,
        format!("{name}: got {got:.6e}, want {want:.6e} +/- {tol:e}"),
    )
}

fn within_rel(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    check(
        ((got - want) / want).abs() <= tol,
        format!("{name}: got {got:.6e}, want {want:.6e} +/- {:.2}%", tol * 100.0),
    )
}

// ---------------------------------------------------------------- 1

fn reference_regression() -> Outcome {
    let params = ProtocolParams::default();
    let a = analyze(&Tally::reference_200km(), &params).map_err(|e| e.to_string())?;
    let (b, r) = (&a.bounds, &a.report);
    let t = params.duration_s;
    within_abs("E_u signal", b.e_upper_mu_prime, 0.0263, 2e-4)?;
    within_abs("E_u decoy", b.e_upper_mu, 0.0633, 2e-4)?;
    within_rel("s1", b.s1, 1.3707e-6, 0.002)?;
    within_rel("s1'", b.s1_prime, 1.2788e-6, 0.005)?;
    within_abs("E1 signal", b.e1_mu_prime, 0.0496, 5e-4)?;
    within_abs("E1 decoy", b.e1_mu, 0.0682, 5e-4)?;
    within_rel("R signal", r.r_mu_prime, 1.7445e-7, 0.01)?;
    within_rel("R decoy", r.r_mu, 6.7564e-8, 0.02)?;
    within_rel("K signal / T", r.k_mu_prime / t, 11.8626, 0.01)?;
    within_rel("K decoy / T", r.k_mu / t, 2.2972, 0.02)?;
    within_abs("total rate", r.rate_total_hz, 14.1, 0.3)?;
    check(!a.flagged(), "analysis flagged a clamp")?;
    Ok(format!(
        "s1 = {:.5e}, s1' = {:.5e}, total = {:.3} Hz",
        b.s1, b.s1_prime, r.rate_total_hz
    ))
}

// ---------------------------------------------------------------- 2

/// Independent restatement of the two constraints on the single-photon rate.
struct Oracle {
    s_mu: f64,
    s_mu_prime: f64,
    n_mu: f64,
    n_sigma: f64,
    s0_eq: f64,
    s0_ineq: f64,
    mu: f64,
    /// Poisson weights: decoy n = 0, 1, 2 and signal n = 0, 1, 2.
    p: [f64; 3],
    pp: [f64; 3],
}

impl Oracle {
    #[allow(clippy::too_many_arguments)]
    fn new(mu: f64, mu_prime: f64, s_mu: f64, s_mu_prime: f64, n_mu: f64, n_sigma: f64, s0_eq: f64, s0_ineq: f64) -> Self {
        let w = |m: f64| [0, 1, 2].map(|n| poisson_pmf(m, n).unwrap());
        Self {
            s_mu,
            s_mu_prime,
            n_mu,
            n_sigma,
            s0_eq,
            s0_ineq,
            mu,
            p: w(mu),
            pp: w(mu_prime),
        }
    }

    fn top(&self) -> f64 {
        (self.s_mu - self.p[0] * self.s0_eq) / self.p[1]
    }

    /// Signal-side bound minus decoy-side multi-photon term.
    fn slack(&self, s1: f64) -> f64 {
        let n = self.n_sigma;
        let tail = 1.0 - self.p[0] - self.p[1];
        let multi = (self.s_mu - self.p[0] * self.s0_eq - self.p[1] * s1) / tail;
        let multi_low = if multi > 0.0 {
            multi * (1.0 - n / (multi * self.n_mu).sqrt()).max(0.0)
        } else {
            0.0
        };
        let single_low = if s1 > 0.0 {
            s1 * (1.0 - n * (self.mu / 2.0).exp() / (self.mu * s1 * self.n_mu).sqrt()).max(0.0)
        } else {
            0.0
        };
        let signal_multi = self.s_mu_prime - self.pp[1] * single_low - self.pp[0] * self.s0_ineq;
        (self.p[2] / self.pp[2]) * signal_multi - tail * multi_low
    }

    /// First grid crossing of `slack` on `[0, top]`, linearly interpolated.
    fn grid_root(&self, points: u32) -> Option<f64> {
        let top = self.top();
        let mut prev = (0.0, self.slack(0.0));
        if prev.1 >= 0.0 {
            return Some(0.0);
        }
        for j in 1..=points {
            let x = top * f64::from(j) / f64::from(points);
            let y = self.slack(x);
            if y >= 0.0 {
                let (x0, y0) = prev;
                return Some(x0 + (x - x0) * (-y0) / (y - y0));
            }
            prev = (x, y);
        }
        None
    }
}

fn random_tally<R: Rng>(rng: &mut R) -> (Tally, ProtocolParams) {
    let mu = rng.random_range(0.05..0.5);
    let mu_prime = rng.random_range(mu + 0.1..1.2);
    let n_total: f64 = 10f64.powf(rng.random_range(10.0..13.0));
    let eta = 10f64.powf(rng.random_range(-6.0..-2.0));
    let y0 = 10f64.powf(rng.random_range(-9.0..-6.0));
    let params = ProtocolParams {
        mu,
        mu_prime,
        total_pulses: n_total as u64,
        ..Default::default()
    }
    .validate()
    .unwrap();
    let n = params.nominal_split();
    let rate = |m: f64| y0 + 1.0 - (-eta * m).exp();
    let c = [
        (n[0] as f64 * y0).round() as u64,
        (n[1] as f64 * rate(mu)).round() as u64,
        (n[2] as f64 * rate(mu_prime)).round() as u64,
    ];
    let tally = Tally::new(n, c, [0.03, 0.02], [0; 3]).unwrap();
    (tally, params)
}

fn solver_oracle() -> Outcome {
    const GRID: u32 = 1_000_000;
    let mut rng = block_rng(2024, Stream::Aggregate, 7);
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut draws = 0;
    while cases < 1000 {
        draws += 1;
        check(draws < 100_000, "could not draw enough feasible tallies")?;
        let (tally, params) = random_tally(&mut rng);
        let s0 = tally.counting_rate(IntensityClass::Vacuum);
        let Ok(vb) = vacuum_bounds(s0, tally.sent(IntensityClass::Vacuum) as f64, params.n_sigma) else {
            continue;
        };
        // Alternate the two vacuum-rate assignments used by the analysis.
        let s0_eq = if cases % 2 == 0 { vb.s0_low } else { vb.s0_high };
        let Ok(sys) = DecoyConstraint::new(&tally, &params, s0_eq, vb.s0_low) else {
            continue;
        };
        let Ok(sol) = sys.solve() else { continue };
        if sol.s1 <= 0.0 {
            continue;
        }
        let oracle = Oracle::new(
            params.mu,
            params.mu_prime,
            tally.counting_rate(IntensityClass::Decoy),
            tally.counting_rate(IntensityClass::Signal),
            tally.sent(IntensityClass::Decoy) as f64,
            params.n_sigma,
            s0_eq,
            vb.s0_low,
        );
        let want = oracle
            .grid_root(GRID)
            .ok_or_else(|| format!("oracle found no root where the solver did: {tally:?}"))?;
        let rel = ((sol.s1 - want) / want).abs();
        worst = worst.max(rel);
        check(
            rel <= 1e-6,
            format!("case {cases}: solver {:.9e} vs oracle {want:.9e}", sol.s1),
        )?;
        cases += 1;
    }

    let params = ProtocolParams::default();
    let tally = Tally::reference_200km();
    let vb = vacuum_bounds(
        tally.counting_rate(IntensityClass::Vacuum),
        tally.sent(IntensityClass::Vacuum) as f64,
        params.n_sigma,
    )
    .unwrap();
    let sol = DecoyConstraint::new(&tally, &params, vb.s0_low, vb.s0_low)
        .unwrap()
        .solve()
        .unwrap();
    within_rel("published s1", sol.s1, 1.3707e-6, 0.002)?;
    check(
        sol.relative_residual.abs() < 1e-10,
        format!("constraint not tight: relative residual {:e}", sol.relative_residual),
    )?;
    Ok(format!(
        "1000 tallies ({draws} drawn), worst relative gap {worst:.2e}; published residual {:.1e}",
        sol.relative_residual
    ))
}

// ---------------------------------------------------------------- 3

fn dark_floor() -> Outcome {
    let params = ProtocolParams::default();
    let channel = ChannelModel::from_params(&params).unwrap();
    let rx = Receiver::new(&channel, &params);
    let s0 = rx.class_statistics(IntensityClass::Vacuum).click;
    // Four independent 1 Hz detectors at 320 MHz: 1 - (1 - 1/f)^4.
    let exact = -(4.0 * (-1.0 / 320e6f64).ln_1p()).exp_m1();
    within_rel("analytic S0", s0, exact, 1e-12)?;
    within_rel("analytic S0 vs 4 d/f", s0, 1.25e-8, 1e-8)?;

    let mut rng = block_rng(3, Stream::Aggregate, 0);
    let counts = simulate_aggregate(&params, &channel, params.total_pulses, &mut rng).unwrap();
    let vac = counts.class(IntensityClass::Vacuum);
    let expected = counts.expected(IntensityClass::Vacuum).clicks;
    let observed = 3263.0f64;
    let sigma_obs = observed.sqrt();
    check(
        (expected - observed).abs() < 5.0 * sigma_obs,
        format!("expected {expected:.1} dark counts, {observed} observed: beyond 5 sigma"),
    )?;
    check(
        (vac.clicks as f64 - expected).abs() < 5.0 * expected.sqrt(),
        format!("sampled {} dark counts vs {expected:.1} expected", vac.clicks),
    )?;
    Ok(format!(
        "S0 = {s0:.6e}; expected C0 = {expected:.0}, observed 3263 ({:.2} sigma); sampled {}",
        (observed - expected) / sigma_obs,
        vac.clicks
    ))
}

// ---------------------------------------------------------------- 4

fn end_to_end() -> Outcome {
    let base = ProtocolParams::default();
    let table = Tally::reference_200km();
    let cal = calibrate_channel(&table, &base).map_err(|e| e.to_string())?;
    let fitted = cal.apply(&base);
    let classes = [IntensityClass::Vacuum, IntensityClass::Decoy, IntensityClass::Signal];

    // Per-pulse at desk scale.
    let n = 100_000_000;
    let config = SimulationConfig {
        params: ProtocolParams {
            total_pulses: n,
            ..fitted.clone()
        },
        ..Default::default()
    };
    let out = simulate(&config, 1, Mode::PerPulse, false).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for class in classes {
        let c = out.counts.class(class);
        let p = table.counting_rate(class);
        let mean = c.sent as f64 * p;
        let sd = (c.sent as f64 * p * (1.0 - p)).sqrt();
        check(
            (c.clicks as f64 - mean).abs() <= 5.0 * sd,
            format!("per-pulse {class:?}: {} clicks vs {mean:.1} +/- {sd:.1}", c.clicks),
        )?;
        notes.push(format!("{}/{mean:.1}", c.clicks));
    }
    let sig = out.counts.class(IntensityClass::Signal);
    let e = table.qber(IntensityClass::Signal);
    if sig.sifted > 0 {
        let sd = (e * (1.0 - e) / sig.sifted as f64).sqrt();
        let got = sig.errors as f64 / sig.sifted as f64;
        check(
            (got - e).abs() <= 5.0 * sd,
            format!("per-pulse signal QBER {got:.4} vs {e} +/- {sd:.4}"),
        )?;
    }
    check(
        out.sync.ambiguous + out.sync.orphan + out.sync.misindexed + out.sync.out_of_range == 0,
        format!("synchronization lost detections: {:?}", out.sync),
    )?;

    // Aggregate at the full published size: expectations within 1%.
    let config = SimulationConfig {
        params: fitted,
        ..Default::default()
    };
    let out = simulate(&config, 1, Mode::Aggregate, false).map_err(|e| e.to_string())?;
    for class in classes {
        let x = out.counts.expected(class);
        within_rel(
            &format!("aggregate {class:?} counting rate"),
            x.clicks / x.sent,
            table.counting_rate(class),
            0.01,
        )?;
    }
    let x = out.counts.expected(IntensityClass::Signal);
    within_rel("aggregate signal QBER", x.errors / x.sifted, e, 0.01)?;
    let tally = out.tally().map_err(|e| e.to_string())?;
    Ok(format!(
        "per-pulse clicks (got/expected) V {}, D {}, S {}; aggregate C = {:?}",
        notes[0],
        notes[1],
        notes[2],
        tally.c_received()
    ))
}

// ---------------------------------------------------------------- 5

fn synchronization() -> Outcome {
    let params = ProtocolParams::default();
    check(params.slots_per_block() == 8000, "slots_per_block != 8000")?;
    let slots: Vec<u64> = (0..24_000).collect();
    let errors_at = |drift: f64| {
        let clock = ClockModel::new(drift, 0.0, 0.0).unwrap();
        let mut rng = block_rng(5, Stream::Clock, 0);
        let ts = emit_timestamps(&slots, &clock, &params, &mut rng).unwrap();
        recover_each(&ts.detections_s, &ts.frames, &params, 0.0)
            .iter()
            .zip(&slots)
            .filter(|(r, &s)| **r != Recovered::Slot(s))
            .count()
    };
    for drift in [0.0, 10.0, 30.0, 50.0, 60.0, -60.0] {
        let n = errors_at(drift);
        check(n == 0, format!("{n} recovery errors at {drift} ppm"))?;
    }
    let mut at_70 = 0;
    for drift in [70.0, 80.0, 100.0, -70.0] {
        let n = errors_at(drift);
        check(n > 0, format!("no recovery errors at {drift} ppm"))?;
        if drift == 70.0 {
            at_70 = n;
        }
    }

    let mut rng = block_rng(55, Stream::Clock, 1);
    for case in 0..10_000 {
        let drift = rng.random_range(-60.0..=60.0);
        let offset = rng.random_range(0.0..100.0);
        let start = rng.random_range(0..1_000_000_000_000u64);
        let mut s = start;
        let picked: Vec<u64> = (0..rng.random_range(1..40))
            .map(|_| {
                s += rng.random_range(0..5_000);
                s
            })
            .collect();
        let clock = ClockModel::new(drift, 0.0, offset).unwrap();
        let ts = emit_timestamps(&picked, &clock, &params, &mut rng).unwrap();
        let got = recover_indices(&ts.detections_s, &ts.frames, &params, 0.0)
            .map_err(|e| format!("case {case}: {e}"))?;
        check(got == picked, format!("case {case}: drift {drift} ppm mis-recovered"))?;
    }
    Ok(format!(
        "clean through +/-60 ppm, {at_70} of 24000 wrong at 70 ppm; 10^4 random round trips exact"
    ))
}

// ---------------------------------------------------------------- 6

fn properties() -> Outcome {
    for i in 0..=1000 {
        let x = f64::from(i) / 1000.0;
        let h = binary_entropy(x).unwrap();
        let h_flip = binary_entropy(1.0 - x).unwrap();
        within_abs("entropy symmetry", h, h_flip, 1e-12)?;
        check(h <= 1.0 + 1e-12, format!("H({x}) = {h} exceeds 1"))?;
    }
    within_abs("H(0.5)", binary_entropy(0.5).unwrap(), 1.0, 1e-12)?;

    let grid: Vec<f64> = (0..=500).map(|i| 0.5 * f64::from(i) / 500.0).collect();
    for (s, delta, e1) in [(9.1e-7, 0.46, 0.0496), (3.1e-7, 0.72, 0.0682), (1e-3, 1.0, 0.0)] {
        let rates: Vec<f64> = grid
            .iter()
            .map(|&e| key_rate(s, delta, e, e1, 1.0).unwrap().value)
            .collect();
        check(
            rates.windows(2).all(|w| w[1] <= w[0]),
            "key rate increases with the error rate",
        )?;
    }

    for i in 0..=2000 {
        let mu = 2.0 * f64::from(i) / 2000.0;
        let tail: f64 = (2..200).map(|n| poisson_pmf(mu, n).unwrap()).sum();
        within_abs("multi-photon tail", multi_photon_tail(mu).unwrap(), tail, 1e-12)?;
    }

    let params = ProtocolParams::default();
    let mut runner = TestRunner::new(Config {
        cases: 2000,
        ..Config::default()
    });
    runner
        .run(
            &(0u64..1_000_000, 0u64..1_000_000, 0.0f64..1.0, 0.0f64..1.0),
            |(n, c, e1, e2)| {
                let ok = Tally::new([n; 3], [c; 3], [e1, e2], [0; 3]).is_ok();
                prop_assert_eq!(ok, c <= n && n > 0 && e1 <= 0.5 && e2 <= 0.5);
                Ok(())
            },
        )
        .map_err(|e| e.to_string())?;
    runner
        .run(
            &(0usize..3, proptest::option::of(0usize..4), 0.0f64..1.0, any::<bool>()),
            |(k, pol, x, exact)| {
                let class = IntensityClass::ALL[k];
                let intensity = if exact { params.intensity(class) } else { x };
                let ok = PulsePlan::from_parts(
                    7,
                    class,
                    pol.map(Polarization::from_index),
                    intensity,
                    &params,
                )
                .is_ok();
                let valid = (pol.is_none() == (class == IntensityClass::Vacuum))
                    && intensity == params.intensity(class);
                prop_assert_eq!(ok, valid);
                Ok(())
            },
        )
        .map_err(|e| e.to_string())?;
    check(
        ProtocolParams {
            mu: 0.6,
            mu_prime: 0.2,
            ..Default::default()
        }
        .validate()
        .is_err(),
        "reversed intensities accepted",
    )?;
    Ok("entropy, key-rate monotonicity, tail identity, Tally/PulsePlan invariants".into())
}

fn main() {
    let criteria: [Criterion; 6] = [
        ("1 published table regression", reference_regression),
        ("2 solver vs grid oracle", solver_oracle),
        ("3 dark-count floor", dark_floor),
        ("4 end-to-end Monte Carlo", end_to_end),
        ("5 synchronization threshold", synchronization),
        ("6 property suites", properties),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        let took = fmt_duration(start.elapsed());
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({took}) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({took}) {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}
