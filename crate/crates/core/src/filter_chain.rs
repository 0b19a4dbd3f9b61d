//! Cascaded Lorentzian filter cavities.
//!
//! Each cavity is treated as a single Lorentzian mode. Besides spectral
//! filtering, the cavities hold each photon for a random time (the intensity
//! ringdown), which is what erases which-atom information in the heralding
//! step.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::config::CavitySpec;

/// `T(delta) = T_peak / (1 + (2 delta / fwhm)^2)`.
pub fn cavity_transmission(cavity: &CavitySpec, detuning: f64) -> f64 {
    let x = 2.0 * detuning / cavity.fwhm;
    cavity.peak_transmission / (1.0 + x * x)
}

/// Intensity decay time of one cavity, `1 / (2 pi fwhm)`.
pub fn ringdown_time(cavity: &CavitySpec) -> f64 {
    1.0 / (2.0 * PI * cavity.fwhm)
}

/// Ordered list of cavities; empty is the identity filter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterChain {
    cavities: Vec<CavitySpec>,
}

impl FilterChain {
    pub fn new(cavities: Vec<CavitySpec>) -> Self {
        Self { cavities }
    }

    pub fn cavities(&self) -> &[CavitySpec] {
        &self.cavities
    }

    /// Product of member transmissions.
    pub fn transmission(&self, detuning: f64) -> f64 {
        self.cavities
            .iter()
            .map(|c| cavity_transmission(c, detuning))
            .product()
    }

    /// Transmission at `detuning` relative to resonance.
    ///
    /// Computed cavity by cavity so the result is exactly 1 at zero detuning
    /// and never underflows through the peak transmissions.
    pub fn relative_suppression(&self, detuning: f64) -> f64 {
        self.cavities
            .iter()
            .map(|c| {
                let x = 2.0 * detuning / c.fwhm;
                1.0 / (1.0 + x * x)
            })
            .product()
    }

    /// Mean total delay, sum of the ringdown times.
    pub fn mean_delay(&self) -> f64 {
        self.cavities.iter().map(ringdown_time).sum()
    }

    /// One photon's dwell time in the chain: a sum of independent
    /// exponentials, one per cavity.
    pub fn sample_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.cavities
            .iter()
            .map(|c| {
                let e: f64 = Exp1.sample(rng);
                e * ringdown_time(c)
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nominal() -> FilterChain {
        FilterChain::new(vec![CavitySpec::new(66e3, 0.66), CavitySpec::new(900e3, 0.90)])
    }

    #[test]
    fn single_cavity_values() {
        let c = CavitySpec::new(900e3, 0.90);
        assert_eq!(cavity_transmission(&c, 0.0), 0.90);
        assert_relative_eq!(cavity_transmission(&c, 450e3), 0.45, max_relative = 1e-12);
        // 0.9 / (1 + (4.8e6 / 9e5)^2) = 0.9 / 29.444...
        assert_relative_eq!(cavity_transmission(&c, 2.4e6), 0.030566, max_relative = 1e-4);
    }

    #[test]
    fn chain_values() {
        let chain = nominal();
        assert_relative_eq!(chain.transmission(0.0), 0.594, max_relative = 1e-12);
        assert_relative_eq!(chain.transmission(2.4e6), 3.81e-6, max_relative = 2e-3);
        assert_relative_eq!(chain.relative_suppression(2.4e6), 6.42e-6, max_relative = 2e-3);
        assert_eq!(chain.relative_suppression(0.0), 1.0);
        assert_eq!(FilterChain::default().transmission(1e6), 1.0);
    }

    #[test]
    fn combined_with_polarizer() {
        let s = nominal().relative_suppression(2.4e6) * 1e-4;
        assert_relative_eq!(s, 6.42e-10, max_relative = 2e-3);
        assert!(s <= 1e-9);
    }

    #[test]
    fn empty_chain_has_no_delay() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(FilterChain::default().sample_delay(&mut rng), 0.0);
    }

    #[test]
    fn delay_is_seed_deterministic() {
        let chain = nominal();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..16).map(|_| chain.sample_delay(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn mean_delay_matches_ringdowns() {
        let chain = nominal();
        let expected = 1.0 / (2.0 * PI * 66e3) + 1.0 / (2.0 * PI * 900e3);
        assert_relative_eq!(chain.mean_delay(), expected, max_relative = 1e-12);
        assert_relative_eq!(expected, 2.5882e-6, max_relative = 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mean = (0..n).map(|_| chain.sample_delay(&mut rng)).sum::<f64>() / n as f64;
        assert_relative_eq!(mean, expected, max_relative = 0.01);
    }
}
