//! Poisson photon-number statistics of a phase-randomized weak coherent pulse.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("mean photon number must be finite and non-negative, got {0}")]
pub struct NegativeMean(pub f64);

fn check(mu: f64) -> Result<(), NegativeMean> {
    if mu >= 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(NegativeMean(mu))
    }
}

/// Probability that a pulse of mean photon number `mu` carries exactly `n` photons.
pub fn poisson_pmf(mu: f64, n: u32) -> Result<f64, NegativeMean> {
    check(mu)?;
    if mu == 0.0 {
        return Ok(if n == 0 { 1.0 } else { 0.0 });
    }
    let ln_fact: f64 = (2..=n).map(|k| f64::from(k).ln()).sum();
    Ok((f64::from(n) * mu.ln() - mu - ln_fact).exp())
}

/// Weight `c = 1 - e^-mu - mu e^-mu` of the two-or-more photon component.
pub fn multi_photon_tail(mu: f64) -> Result<f64, NegativeMean> {
    check(mu)?;
    // 1 - e^-mu via expm1 keeps precision for small mu.
    Ok((-(-mu).exp_m1() - mu * (-mu).exp()).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vacuum_source() {
        assert_eq!(poisson_pmf(0.0, 0).unwrap(), 1.0);
        assert_eq!(poisson_pmf(0.0, 3).unwrap(), 0.0);
        assert_eq!(multi_photon_tail(0.0).unwrap(), 0.0);
    }

    #[test]
    fn direct_values() {
        // mu' e^-mu' and e^-mu evaluated by hand.
        assert!((poisson_pmf(0.6, 1).unwrap() - 0.6 * (-0.6f64).exp()).abs() < 1e-15);
        assert!((poisson_pmf(0.6, 1).unwrap() - 0.329287).abs() < 5e-7);
        assert!((poisson_pmf(0.2, 0).unwrap() - 0.818731).abs() < 5e-7);
        assert!((multi_photon_tail(0.2).unwrap() - 0.0175231).abs() < 5e-8);
        assert!((multi_photon_tail(0.6).unwrap() - 0.1219014).abs() < 5e-8);
    }

    #[test]
    fn negative_mean_rejected() {
        assert!(poisson_pmf(-0.1, 0).is_err());
        assert!(multi_photon_tail(-1.0).is_err());
        assert!(multi_photon_tail(f64::NAN).is_err());
    }

    #[test]
    fn tail_equals_sum_of_higher_terms() {
        for i in 0..=200 {
            let mu = i as f64 * 0.01;
            let direct: f64 = (2..60).map(|n| poisson_pmf(mu, n).unwrap()).sum();
            assert!((multi_photon_tail(mu).unwrap() - direct).abs() < 1e-12, "mu={mu}");
        }
    }

    #[test]
    fn pmf_normalized() {
        for mu in [0.05, 0.2, 0.6, 2.0, 7.5] {
            let total: f64 = (0..120).map(|n| poisson_pmf(mu, n).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
