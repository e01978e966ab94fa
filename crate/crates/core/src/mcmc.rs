//! Hamming-ball Metropolis–Hastings, Swendsen–Wang and the categorical
//! kernel, used both as exploration moves and as baseline samplers.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::targets::{Energy, LatticeParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum McmcKernel {
    /// Proposal: `h` sequential single-site resamples to a different value.
    Mh { h: usize },
    SwendsenWang,
    /// Proposal: each site stays with probability `p_stay`, otherwise moves
    /// uniformly to one of the other values.
    Categorical { p_stay: f64 },
}

impl McmcKernel {
    pub fn validate(&self, target: &dyn Energy) -> Result<()> {
        match *self {
            McmcKernel::Mh { h } if h == 0 => Err(Error::config("Hamming-ball radius H must be at least 1")),
            McmcKernel::SwendsenWang if target.lattice().is_none() => Err(Error::config(format!(
                "Swendsen-Wang needs a lattice target, `{}` is not one",
                target.name()
            ))),
            McmcKernel::Categorical { p_stay } if !(p_stay > 0.0 && p_stay < 1.0) => {
                Err(Error::config(format!("stay probability {p_stay} must lie in (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// One transition from `x` (whose energy is `e_x`); returns the new state's energy.
    pub fn step<R: Rng + ?Sized>(
        &self,
        target: &dyn Energy,
        x: &mut Vec<u8>,
        e_x: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let c = target.space().c;
        match *self {
            McmcKernel::Mh { h } => {
                let mut y = x.clone();
                for _ in 0..h {
                    let i = rng.gen_range(0..y.len());
                    y[i] = other_symbol(y[i], c, rng);
                }
                metropolis(target, x, e_x, y, rng)
            }
            McmcKernel::Categorical { p_stay } => {
                let mut y = x.clone();
                for s in y.iter_mut() {
                    if rng.gen::<f64>() >= p_stay {
                        *s = other_symbol(*s, c, rng);
                    }
                }
                metropolis(target, x, e_x, y, rng)
            }
            McmcKernel::SwendsenWang => {
                let params = target
                    .lattice()
                    .ok_or_else(|| Error::config("Swendsen-Wang needs a lattice target"))?;
                swendsen_wang_step(x, &params, rng);
                target.energy(x)
            }
        }
    }
}

fn other_symbol<R: Rng + ?Sized>(s: u8, c: usize, rng: &mut R) -> u8 {
    let v = rng.gen_range(0..c - 1) as u8;
    if v >= s {
        v + 1
    } else {
        v
    }
}

/// Accepts `y` with probability `min(1, e^{E(x) - E(y)})`; the proposals
/// used here are symmetric so no Hastings correction is needed.
fn metropolis<R: Rng + ?Sized>(
    target: &dyn Energy,
    x: &mut Vec<u8>,
    e_x: f64,
    y: Vec<u8>,
    rng: &mut R,
) -> Result<f64> {
    let e_y = target.energy(&y)?;
    let log_accept = e_x - e_y;
    if log_accept >= 0.0 || rng.gen::<f64>().ln() < log_accept {
        *x = y;
        Ok(e_y)
    } else {
        Ok(e_x)
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Cluster move: open each bond between equal neighbours with probability
/// `1 - e^{-βJ}`, then give every connected component a uniform new label.
pub fn swendsen_wang_step<R: Rng + ?Sized>(x: &mut [u8], params: &LatticeParams, rng: &mut R) {
    let p_bond = 1.0 - (-params.beta * params.j).exp();
    let mut parent: Vec<usize> = (0..x.len()).collect();
    for (a, b) in params.edges() {
        if x[a] == x[b] && rng.gen::<f64>() < p_bond {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut label = vec![u8::MAX; x.len()];
    for i in 0..x.len() {
        let r = find(&mut parent, i);
        if label[r] == u8::MAX {
            label[r] = rng.gen_range(0..params.q) as u8;
        }
        x[i] = label[r];
    }
}

/// Advances each state `steps` transitions on its own stream and keeps the final state.
pub fn refine_batch(
    kernel: &McmcKernel,
    target: &dyn Energy,
    states: Vec<Vec<u8>>,
    steps: usize,
    seed: u64,
    tags: &[u64],
) -> Result<Vec<Vec<u8>>> {
    kernel.validate(target)?;
    if steps == 0 {
        return Ok(states);
    }
    states
        .into_par_iter()
        .enumerate()
        .map(|(m, mut x)| {
            let mut key = tags.to_vec();
            key.push(m as u64);
            let mut rng = rng::stream(seed, &key);
            let mut e = target.energy(&x)?;
            for _ in 0..steps {
                e = kernel.step(target, &mut x, e, &mut rng)?;
            }
            Ok(x)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub chains: usize,
    pub burn_in: usize,
    pub samples_per_chain: usize,
    pub thin: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { chains: 128, burn_in: 2000, samples_per_chain: 128, thin: 200 }
    }
}

/// Independent chains from uniform starts; after burn-in, every `thin`-th
/// state is recorded. Samples are ordered chain by chain.
pub fn run_chains(
    kernel: &McmcKernel,
    target: &dyn Energy,
    cfg: &ChainConfig,
    seed: u64,
) -> Result<Vec<Vec<u8>>> {
    kernel.validate(target)?;
    if cfg.thin == 0 {
        return Err(Error::config("thinning interval must be at least 1"));
    }
    let space = target.space();
    let per_chain: Vec<Vec<Vec<u8>>> = (0..cfg.chains)
        .into_par_iter()
        .map(|ch| {
            let mut rng = rng::stream(seed, &[rng::tag::MCMC, ch as u64]);
            let mut x: Vec<u8> = (0..space.d).map(|_| rng.gen_range(0..space.c) as u8).collect();
            let mut e = target.energy(&x)?;
            for _ in 0..cfg.burn_in {
                e = kernel.step(target, &mut x, e, &mut rng)?;
            }
            let mut out = Vec::with_capacity(cfg.samples_per_chain);
            for s in 0..cfg.samples_per_chain {
                if s > 0 {
                    for _ in 0..cfg.thin {
                        e = kernel.step(target, &mut x, e, &mut rng)?;
                    }
                }
                out.push(x.clone());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_chain.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{EnumerationOracle, FnEnergy, LatticeTarget, StateSpace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    /// χ² goodness of fit at 99%, pooling bins expected to hold fewer than 5 counts.
    fn chi2_passes(counts: &[usize], probs: &[f64]) -> (bool, f64, f64) {
        let n: usize = counts.iter().sum();
        let (mut stat, mut dof) = (0.0, 0usize);
        let (mut pool_obs, mut pool_exp) = (0.0, 0.0);
        for (&o, &p) in counts.iter().zip(probs) {
            let e = p * n as f64;
            if e < 5.0 {
                pool_obs += o as f64;
                pool_exp += e;
            } else {
                stat += (o as f64 - e).powi(2) / e;
                dof += 1;
            }
        }
        if pool_exp > 0.0 {
            stat += (pool_obs - pool_exp).powi(2) / pool_exp.max(1e-12);
            dof += 1;
        }
        let crit = ChiSquared::new((dof - 1) as f64).unwrap().inverse_cdf(0.99);
        (stat < crit, stat, crit)
    }

    fn invariance(kernel: McmcKernel, target: &dyn Energy, seed: u64) {
        let oracle = EnumerationOracle::new(target).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0usize; oracle.len()];
        for _ in 0..100_000 {
            let mut x = oracle.sample(&mut rng);
            let e = target.energy(&x).unwrap();
            kernel.step(target, &mut x, e, &mut rng).unwrap();
            counts[oracle.index_of(&x)] += 1;
        }
        let (ok, stat, crit) = chi2_passes(&counts, oracle.probs());
        assert!(ok, "{kernel:?}: chi2 {stat} >= {crit}");
    }

    fn toy_categorical() -> FnEnergy {
        let space = StateSpace::new(2, 8).unwrap();
        FnEnergy::new("toy", space, |x| 0.3 * (x[0] as f64 - 2.0).powi(2) - 0.5 * (x[0] == x[1]) as u8 as f64)
    }

    #[test]
    fn mh_leaves_target_invariant() {
        let t = LatticeTarget::ising(3, 0.6).unwrap();
        invariance(McmcKernel::Mh { h: 1 }, &t, 1);
        invariance(McmcKernel::Mh { h: 3 }, &toy_categorical(), 0);
    }

    #[test]
    fn swendsen_wang_leaves_target_invariant() {
        invariance(McmcKernel::SwendsenWang, &LatticeTarget::ising(3, 0.6).unwrap(), 3);
        invariance(McmcKernel::SwendsenWang, &LatticeTarget::potts(3, 3, 1.005).unwrap(), 4);
    }

    #[test]
    fn categorical_leaves_target_invariant() {
        invariance(McmcKernel::Categorical { p_stay: 0.7 }, &toy_categorical(), 5);
    }

    #[test]
    fn swendsen_wang_detailed_balance_2x2() {
        let t = LatticeTarget::ising(2, 0.8).unwrap();
        let oracle = EnumerationOracle::new(&t).unwrap();
        let params = t.lattice().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pairs = vec![[0usize; 16]; 16];
        for _ in 0..200_000 {
            let a = oracle.sample(&mut rng);
            let mut b = a.clone();
            swendsen_wang_step(&mut b, &params, &mut rng);
            pairs[oracle.index_of(&a)][oracle.index_of(&b)] += 1;
        }
        // π(a)P(a→b) = π(b)P(b→a): the joint count table is symmetric
        let (mut stat, mut dof) = (0.0, 0);
        for a in 0..16 {
            for b in a + 1..16 {
                let (n1, n2) = (pairs[a][b] as f64, pairs[b][a] as f64);
                if n1 + n2 > 0.0 {
                    stat += (n1 - n2).powi(2) / (n1 + n2);
                    dof += 1;
                }
            }
        }
        let crit = ChiSquared::new(dof as f64).unwrap().inverse_cdf(0.99);
        assert!(stat < crit, "{stat} >= {crit}");
    }

    #[test]
    fn swendsen_wang_at_tiny_beta_resamples_independently() {
        let params = LatticeParams { side: 2, q: 2, j: 0.5, beta: 1e-8 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 16];
        for _ in 0..50_000 {
            let mut x = vec![0u8; 4];
            swendsen_wang_step(&mut x, &params, &mut rng);
            counts[x.iter().fold(0, |a, &b| a * 2 + b as usize)] += 1;
        }
        assert!(chi2_passes(&counts, &[1.0 / 16.0; 16]).0);
    }

    #[test]
    fn swendsen_wang_keeps_shape_and_range() {
        let t = LatticeTarget::potts(4, 3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut x = vec![2u8; 16];
        for _ in 0..100 {
            let e = t.energy(&x).unwrap();
            McmcKernel::SwendsenWang.step(&t, &mut x, e, &mut rng).unwrap();
            assert_eq!(x.len(), 16);
            assert!(x.iter().all(|&s| s < 3));
        }
    }

    #[test]
    fn two_state_stationary_frequencies() {
        let space = StateSpace::new(1, 2).unwrap();
        let t = FnEnergy::new("two", space, |x| if x[0] == 0 { 0.0 } else { 2f64.ln() });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = vec![0u8];
        let mut e = 0.0;
        let mut zeros = 0;
        let n = 100_000;
        for _ in 0..n {
            e = McmcKernel::Mh { h: 1 }.step(&t, &mut x, e, &mut rng).unwrap();
            zeros += (x[0] == 0) as usize;
        }
        assert!((zeros as f64 / n as f64 - 2.0 / 3.0).abs() < 0.02);
    }

    #[test]
    fn constant_energy_always_accepts() {
        let space = StateSpace::new(5, 3).unwrap();
        let t = FnEnergy::new("flat", space, |_| 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut x = vec![0u8; 5];
        for _ in 0..100 {
            let before = x.clone();
            McmcKernel::Mh { h: 1 }.step(&t, &mut x, 1.0, &mut rng).unwrap();
            assert_eq!(before.iter().zip(&x).filter(|(a, b)| a != b).count(), 1);
        }
    }

    #[test]
    fn configuration_errors() {
        let flat = FnEnergy::new("flat", StateSpace::new(3, 2).unwrap(), |_| 0.0);
        assert!(matches!(McmcKernel::SwendsenWang.validate(&flat), Err(Error::Config(_))));
        assert!(McmcKernel::Mh { h: 0 }.validate(&flat).is_err());
        assert!(McmcKernel::Categorical { p_stay: 1.0 }.validate(&flat).is_err());
    }

    #[test]
    fn refine_with_zero_steps_is_identity() {
        let t = LatticeTarget::ising(3, 0.6).unwrap();
        let states = vec![vec![0u8; 9], vec![1u8; 9]];
        assert_eq!(refine_batch(&McmcKernel::Mh { h: 1 }, &t, states.clone(), 0, 1, &[]).unwrap(), states);
        let out = refine_batch(&McmcKernel::SwendsenWang, &t, vec![vec![0u8; 9]; 128], 100, 1, &[2]).unwrap();
        assert_eq!(out.len(), 128);
    }

    #[test]
    fn refine_lowers_energy_at_low_temperature() {
        let space = StateSpace::new(6, 4).unwrap();
        let t = FnEnergy::new("bowl", space, |x| 4.0 * x.iter().map(|&s| (s as f64 - 1.0).powi(2)).sum::<f64>());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let starts: Vec<Vec<u8>> = (0..256).map(|_| (0..6).map(|_| rng.gen_range(0..4)).collect()).collect();
        let mean = |xs: &[Vec<u8>]| xs.iter().map(|x| t.energy(x).unwrap()).sum::<f64>() / xs.len() as f64;
        let before = mean(&starts);
        let after = mean(&refine_batch(&McmcKernel::Mh { h: 1 }, &t, starts, 100, 3, &[]).unwrap());
        assert!(after < before);
    }

    #[test]
    fn run_chains_shape() {
        let t = LatticeTarget::ising(3, 0.6).unwrap();
        let cfg = ChainConfig { chains: 4, burn_in: 10, samples_per_chain: 5, thin: 2 };
        let s = run_chains(&McmcKernel::SwendsenWang, &t, &cfg, 0).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(s, run_chains(&McmcKernel::SwendsenWang, &t, &cfg, 0).unwrap());
        assert_eq!(ChainConfig::default().chains * ChainConfig::default().samples_per_chain, 16384);
    }
}
