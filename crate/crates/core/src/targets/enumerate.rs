use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::log_sum_exp;
use crate::targets::{Energy, StateSpace};

/// Largest state space the oracle will enumerate.
pub const ENUMERATION_LIMIT: u128 = 1 << 20;

/// Index of `x` with position 0 as the most significant base-`c` digit.
pub(crate) fn index_of(x: &[u8], c: usize) -> usize {
    x.iter().fold(0usize, |acc, &s| acc * c + s as usize)
}

pub(crate) fn state_of(mut idx: usize, d: usize, c: usize) -> Vec<u8> {
    let mut x = vec![0u8; d];
    for slot in x.iter_mut().rev() {
        *slot = (idx % c) as u8;
        idx /= c;
    }
    x
}

/// Exact normalised table of a small target.
#[derive(Debug, Clone)]
pub struct EnumerationOracle {
    space: StateSpace,
    log_z: f64,
    probs: Vec<f64>,
    energies: Vec<f64>,
    cumulative: Vec<f64>,
}

impl EnumerationOracle {
    pub fn new(target: &dyn Energy) -> Result<Self> {
        let space = target.space();
        let size = space.size();
        if size > ENUMERATION_LIMIT {
            return Err(Error::Capacity { states: size, limit: ENUMERATION_LIMIT });
        }
        let (d, c) = (space.d, space.c);
        let energies = (0..size as usize)
            .into_par_iter()
            .map(|i| target.energy(&state_of(i, d, c)))
            .collect::<Result<Vec<f64>>>()?;
        Self::from_energies(space, energies)
    }

    pub fn from_energies(space: StateSpace, energies: Vec<f64>) -> Result<Self> {
        if energies.len() as u128 != space.size() {
            return Err(Error::config("energy table size differs from C^d"));
        }
        if let Some(i) = energies.iter().position(|e| !e.is_finite()) {
            return Err(Error::domain(format!("non-finite energy at state {i}")));
        }
        // streaming log-sum-exp over -E
        let mut max = f64::NEG_INFINITY;
        let mut acc = 0.0;
        for &e in &energies {
            let v = -e;
            if v > max {
                acc = acc * (max - v).exp() + 1.0;
                max = v;
            } else {
                acc += (v - max).exp();
            }
        }
        let log_z = max + acc.ln();
        let probs: Vec<f64> = energies.iter().map(|e| (-e - log_z).exp()).collect();
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut run = 0.0;
        for p in &probs {
            run += p;
            cumulative.push(run);
        }
        Ok(Self { space, log_z, probs, energies, cumulative })
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn index_of(&self, x: &[u8]) -> usize {
        index_of(x, self.space.c)
    }

    pub fn state(&self, idx: usize) -> Vec<u8> {
        state_of(idx, self.space.d, self.space.c)
    }

    pub fn prob(&self, x: &[u8]) -> f64 {
        self.probs[self.index_of(x)]
    }

    /// Exact draw by inverse-CDF lookup.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        let total = *self.cumulative.last().unwrap();
        let u = rng.gen::<f64>() * total;
        let idx = self.cumulative.partition_point(|&c| c <= u).min(self.len() - 1);
        self.state(idx)
    }

    /// `E_p[f(x)]` under the exact distribution.
    pub fn expectation(&self, f: impl Fn(&[u8]) -> f64) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| p * f(&self.state(i)))
            .sum()
    }

    /// `log Z` recomputed with a plain (non-streaming) log-sum-exp.
    pub fn log_z_direct(&self) -> f64 {
        let neg: Vec<f64> = self.energies.iter().map(|e| -e).collect();
        log_sum_exp(&neg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{ContinuousEnergy, FnEnergy, GaussianMixture, GrayCodeConfig, GrayTarget, LatticeTarget};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_energy() {
        let t = FnEnergy::new("flat", StateSpace::new(3, 2).unwrap(), |_| 0.0);
        let o = EnumerationOracle::new(&t).unwrap();
        assert!((o.log_z() - 3.0 * 2f64.ln()).abs() < 1e-14);
        assert!(o.probs().iter().all(|p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn ising_3x3_matches_independent_double_loop() {
        let beta = 0.6;
        let t = LatticeTarget::ising(3, beta).unwrap();
        let o = EnumerationOracle::new(&t).unwrap();
        // independent enumeration over bit patterns and explicit neighbour loops
        let mut z = 0.0;
        for bits in 0u32..512 {
            let s = |r: usize, c: usize| (bits >> ((r % 3) * 3 + c % 3)) & 1;
            let mut agree = 0;
            for r in 0..3 {
                for c in 0..3 {
                    agree += (s(r, c) == s(r, c + 1)) as u32 + (s(r, c) == s(r + 1, c)) as u32;
                }
            }
            z += (beta * 0.5 * agree as f64).exp();
        }
        assert!((o.log_z() - z.ln()).abs() < 1e-12);
        assert!((o.probs().iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn delta_target() {
        let space = StateSpace::new(9, 2).unwrap();
        let t = FnEnergy::new("delta", space, |x| if x.iter().all(|&s| s == 1) { 0.0 } else { 40.0 });
        let o = EnumerationOracle::new(&t).unwrap();
        assert!(o.prob(&[1; 9]) >= 1.0 - 512.0 * (-40f64).exp());
    }

    #[test]
    fn too_large_is_capacity_error() {
        let t = FnEnergy::new("big", StateSpace::new(21, 2).unwrap(), |_| 0.0);
        assert!(matches!(EnumerationOracle::new(&t), Err(Error::Capacity { .. })));
    }

    #[test]
    fn log_z_monotone_in_beta_for_ground_shifted_ising() {
        // E - E_min ≥ 0, so log Z of the shifted energy cannot increase with β
        let mut prev = f64::INFINITY;
        for k in 1..=12 {
            let beta = 0.1 * k as f64;
            let o = EnumerationOracle::new(&LatticeTarget::ising(3, beta).unwrap()).unwrap();
            let e_min = o.energies().iter().copied().fold(f64::INFINITY, f64::min);
            let shifted = o.log_z() + e_min;
            assert!(shifted <= prev + 1e-12);
            assert!((o.log_z() - o.log_z_direct()).abs() < 1e-12);
            prev = shifted;
        }
    }

    #[test]
    fn index_round_trip() {
        for i in 0..81 {
            assert_eq!(index_of(&state_of(i, 4, 3), 3), i);
        }
    }

    #[test]
    fn sampling_hits_table() {
        let t = FnEnergy::new("two", StateSpace::new(1, 2).unwrap(), |x| if x[0] == 0 { 0.0 } else { 3f64.ln() });
        let o = EnumerationOracle::new(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let zeros = (0..n).filter(|_| o.sample(&mut rng)[0] == 0).count();
        assert!((zeros as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn gray_gaussian_masses_match_quadrature() {
        let cfg = GrayCodeConfig { dims: 1, bits: 4, half_width: 4.0 };
        let gauss = GaussianMixture::new(vec![vec![0.0]]).unwrap();
        let t = GrayTarget::new("g", cfg, ContinuousEnergy::Mixture(gauss)).unwrap();
        let o = EnumerationOracle::new(&t).unwrap();
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        // Simpson's rule per bin
        let simpson = |a: f64, b: f64| {
            let n = 200;
            let h = (b - a) / n as f64;
            let mut s = pdf(a) + pdf(b);
            for i in 1..n {
                s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let mut total_mass = 0.0;
        let mut total_quad = 0.0;
        for k in 0..16u32 {
            let x = gray_encode_for_test(k);
            let mass = (-t.energy(&x).unwrap()).exp();
            let lo = -4.0 + k as f64 * 0.5;
            let quad = simpson(lo, lo + 0.5);
            assert!((mass - quad).abs() < 0.02 * quad.max(0.05), "bin {k}: {mass} vs {quad}");
            total_mass += mass;
            total_quad += quad;
        }
        assert!((total_mass - total_quad).abs() < 0.02 * total_quad);
        assert!((o.log_z() - total_mass.ln()).abs() < 1e-12);
    }

    fn gray_encode_for_test(k: u32) -> Vec<u8> {
        crate::targets::gray_encode(k, 4).unwrap()
    }
}
