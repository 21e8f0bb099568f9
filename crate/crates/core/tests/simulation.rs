use decoy_qkd::analysis::analyze;
use decoy_qkd::channel::ChannelModel;
use decoy_qkd::io::{parse_tally, write_tally, TallyFile};
use decoy_qkd::model::{IntensityClass, ProtocolParams};
use decoy_qkd::pipeline::{simulate, Mode, SimulationConfig};
use decoy_qkd::source::{class_histogram, SourceStream};
use decoy_qkd::sync::ClockModel;
use proptest::prelude::*;

fn short_link(n: u64) -> SimulationConfig {
    SimulationConfig {
        params: ProtocolParams {
            fiber_length_km: 25.0,
            dark_rates_hz: [2e4, 3e4, 1e4, 2.5e4],
            detector_efficiencies: [0.1, 0.12, 0.08, 0.1],
            misalignment_prob: 0.02,
            total_pulses: n,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn within_sigma(got: u64, mean: f64, p: f64, n: f64, k: f64) -> bool {
    let sd = (n * p * (1.0 - p)).sqrt().max(1.0);
    (got as f64 - mean).abs() <= k * sd
}

#[test]
fn per_pulse_matches_analytic_expectations() {
    let out = simulate(&short_link(4_000_000), 11, Mode::PerPulse, false).unwrap();
    for class in IntensityClass::ALL {
        let c = out.counts.class(class);
        let x = out.counts.expected(class);
        let n = c.sent as f64;
        let scale = n / x.sent;
        assert!(within_sigma(c.clicks, x.clicks * scale, x.clicks / x.sent, n, 5.0), "{class:?} {c:?} {x:?}");
        assert!(within_sigma(c.sifted, x.sifted * scale, x.sifted / x.sent, n, 5.0), "{class:?} {c:?} {x:?}");
        assert!(within_sigma(c.errors, x.errors * scale, x.errors / x.sent, n, 5.0), "{class:?} {c:?} {x:?}");
    }
}

#[test]
fn aggregate_samples_around_expectation() {
    let cfg = short_link(50_000_000_000);
    for seed in 0..5 {
        let out = simulate(&cfg, seed, Mode::Aggregate, false).unwrap();
        for class in IntensityClass::ALL {
            let c = out.counts.class(class);
            let x = out.counts.expected(class);
            let n = x.sent;
            assert!(within_sigma(c.sent, x.sent, cfg.params.class_probs[class.index()], 5e10, 5.0));
            assert!(within_sigma(c.clicks, x.clicks, x.clicks / n, n, 5.0), "{class:?}");
            assert!(within_sigma(c.errors, x.errors, x.errors / n, n, 5.0), "{class:?}");
            assert!(c.phase_test + c.bit_test <= c.sifted);
            assert!(c.phase_test_errors <= c.errors.min(c.phase_test));
        }
    }
}

#[test]
fn class_mix_within_five_sigma() {
    let p = ProtocolParams::default();
    let plans = SourceStream::new(77, 1_000_000, &p).generate_block(3);
    let h = class_histogram(&plans);
    let n = plans.len() as f64;
    for (k, share) in [0.25, 0.25, 0.5].into_iter().enumerate() {
        assert!(within_sigma(h.by_class[k], n * share, share, n, 5.0), "{h:?}");
    }
}

#[test]
fn tally_file_feeds_analysis() {
    let cfg = SimulationConfig {
        params: ProtocolParams {
            fiber_length_km: 50.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = simulate(&cfg, 2, Mode::Aggregate, false).unwrap();
    let file = TallyFile::new(out.tally().unwrap().clone(), &cfg.params);
    let text = write_tally(&file);
    let back = parse_tally(&text).unwrap();
    assert_eq!(back, file);
    let report = analyze(&back.tally, &back.params(&cfg.params)).unwrap();
    assert!(report.report.rate_total_hz > 0.0);
}

#[test]
fn jitter_below_guard_is_harmless() {
    let mut cfg = short_link(2_000_000);
    cfg.clock = ClockModel::new(-15.0, 1e-12, 42.0).unwrap();
    let out = simulate(&cfg, 6, Mode::PerPulse, true).unwrap();
    assert_eq!(out.sync.misindexed, 0);
    assert_eq!(out.sync.orphan, 0);
    let dets = out.detections.unwrap();
    assert!(dets.windows(2).all(|w| w[0].slot_index < w[1].slot_index));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Simulate then analyze never panics across the parameter space.
    #[test]
    fn simulate_then_analyze(
        length in 0.0f64..300.0,
        mu in 0.05f64..0.5,
        gap in 0.05f64..0.7,
        dark in 0.0f64..1e4,
        e_mis in 0.0f64..0.2,
        log_n in 6.0f64..13.0,
        seed in any::<u64>(),
    ) {
        let cfg = SimulationConfig {
            params: ProtocolParams {
                fiber_length_km: length,
                mu,
                mu_prime: mu + gap,
                dark_rates_hz: [dark; 4],
                misalignment_prob: e_mis,
                total_pulses: 10f64.powf(log_n) as u64,
                ..Default::default()
            },
            ..Default::default()
        };
        prop_assume!(cfg.params.clone().validate().is_ok());
        prop_assume!(ChannelModel::from_params(&cfg.params).is_ok());
        let out = simulate(&cfg, seed, Mode::Aggregate, false).unwrap();
        if let Ok(tally) = out.tally() {
            let _ = analyze(tally, &cfg.params);
        }
    }
}
