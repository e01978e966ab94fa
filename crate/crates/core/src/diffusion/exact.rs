//! Exact marginals by dynamic programming, for spaces small enough to enumerate.

use std::collections::BTreeMap;

use crate::diffusion::{DiffusionSampler, Process, UniformKernel, MASK};
use crate::error::{Error, Result};
use crate::targets::enumerate::{index_of, state_of};
use crate::targets::{StateSpace, ENUMERATION_LIMIT};

fn check_size(states: u128) -> Result<()> {
    if states > ENUMERATION_LIMIT {
        return Err(Error::Capacity { states, limit: ENUMERATION_LIMIT });
    }
    Ok(())
}

fn subsets(items: &[usize], k: usize, out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, from: usize) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in from..items.len() {
        if items.len() - i < k - cur.len() {
            break;
        }
        cur.push(items[i]);
        subsets(items, k, out, cur, i + 1);
        cur.pop();
    }
}

/// Distribution of `X_N` under the sampler's forward kernel, indexed like
/// [`crate::targets::EnumerationOracle`].
pub fn exact_terminal_distribution(sampler: &DiffusionSampler) -> Result<Vec<f64>> {
    let space = sampler.space();
    check_size(space.size())?;
    let (d, c) = (space.d, space.c);
    match sampler.process() {
        Process::Masked { schedule } => {
            check_size((c as u128 + 1).pow(d as u32))?;
            let mut out = vec![0.0; c.pow(d as u32)];
            for (counts, p_sched) in schedule.distribution(d)? {
                let mut layer: BTreeMap<Vec<u8>, f64> = BTreeMap::from([(vec![MASK; d], p_sched)]);
                for &k in &counts {
                    let mut next: BTreeMap<Vec<u8>, f64> = BTreeMap::new();
                    for (x, p) in layer {
                        let rows = sampler.forward_rows(&x, 0)?;
                        let masked: Vec<usize> = (0..d).filter(|&i| x[i] == MASK).collect();
                        let mut sets = Vec::new();
                        subsets(&masked, k, &mut sets, &mut Vec::new(), 0);
                        let p_set = p / sets.len() as f64;
                        for set in sets {
                            for assign in 0..c.pow(k as u32) {
                                let vals = state_of(assign, k, c);
                                let mut y = x.clone();
                                let mut q = p_set;
                                for (&i, &v) in set.iter().zip(&vals) {
                                    y[i] = v;
                                    q *= rows[i * c + v as usize].exp();
                                }
                                *next.entry(y).or_insert(0.0) += q;
                            }
                        }
                    }
                    layer = next;
                }
                for (x, p) in layer {
                    out[index_of(&x, c)] += p;
                }
            }
            Ok(out)
        }
        Process::Uniform { .. } => {
            let n = c.pow(d as u32);
            propagate_uniform(sampler, &vec![1.0 / n as f64; n])
        }
    }
}

/// Pushes `initial` (indexed like the oracle) through every step of a
/// uniform-process sampler's learned kernel.
pub fn propagate_uniform(sampler: &DiffusionSampler, initial: &[f64]) -> Result<Vec<f64>> {
    let space = sampler.space();
    check_size(space.size())?;
    let Process::Uniform { kernel } = sampler.process() else {
        return Err(Error::config("propagation needs a uniform-process sampler"));
    };
    let (d, c) = (space.d, space.c);
    let n = c.pow(d as u32);
    if initial.len() != n {
        return Err(Error::domain(format!("distribution has {} entries, space has {n}", initial.len())));
    }
    let targets: Vec<Vec<u8>> = (0..n).map(|i| state_of(i, d, c)).collect();
    let mut dist = initial.to_vec();
    for step in 0..kernel.steps {
        let mut next = vec![0.0; n];
        for (from, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let probs: Vec<f64> = sampler.forward_rows(&targets[from], step)?.iter().map(|v| v.exp()).collect();
            for (slot, y) in next.iter_mut().zip(&targets) {
                let q: f64 = y.iter().enumerate().map(|(i, &v)| probs[i * c + v as usize]).product();
                *slot += p * q;
            }
        }
        dist = next;
    }
    Ok(dist)
}

/// Row-major `S x S` table of `Q_N(to | from)` for the full reference chain.
pub fn reference_transition(space: StateSpace, kernel: &UniformKernel) -> Result<Vec<f64>> {
    check_size(space.size())?;
    let n = space.c.pow(space.d as u32);
    let mut out = Vec::with_capacity(n * n);
    for from in 0..n {
        let mut delta = vec![0.0; n];
        delta[from] = 1.0;
        // the kernel is symmetric, so noising a point mass gives the forward row
        out.extend(uniform_noising_marginal(space, kernel, &delta)?);
    }
    Ok(out)
}

/// Marginal of `X_0` when `X_N ~ terminal` is noised by `kernel` for all its steps.
pub fn uniform_noising_marginal(space: StateSpace, kernel: &UniformKernel, terminal: &[f64]) -> Result<Vec<f64>> {
    check_size(space.size())?;
    let (d, c) = (space.d, space.c);
    let n = c.pow(d as u32);
    if terminal.len() != n {
        return Err(Error::domain(format!("distribution has {} entries, space has {n}", terminal.len())));
    }
    // the kernel factorises, so apply it one position at a time
    let stay = 1.0 - kernel.p_flip;
    let change = kernel.p_flip / (c - 1) as f64;
    let mut dist = terminal.to_vec();
    for _ in 0..kernel.steps {
        for pos in 0..d {
            let stride = c.pow((d - 1 - pos) as u32);
            let mut next = vec![0.0; n];
            for (idx, &p) in dist.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let cur = (idx / stride) % c;
                let base = idx - cur * stride;
                for v in 0..c {
                    next[base + v * stride] += p * if v == cur { stay } else { change };
                }
            }
            dist = next;
        }
    }
    Ok(dist)
}

/// Distribution of `X_0` for the uniform process: the reference prior.
pub fn exact_initial_distribution(space: StateSpace) -> Result<Vec<f64>> {
    check_size(space.size())?;
    let n = space.c.pow(space.d as u32);
    Ok(vec![1.0 / n as f64; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::MaskingSchedule;
    use crate::nn::PolicyNet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed(space: StateSpace, process: Process, seed: u64) -> DiffusionSampler {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = DiffusionSampler::new(space, process, &[6], &mut rng).unwrap();
        let params: Vec<f64> = s.net().params().iter().map(|_| rng.gen_range(-0.8..0.8)).collect();
        let net = PolicyNet::from_params(s.net().layer_dims(), params).unwrap();
        *s.net_mut() = net;
        s
    }

    fn empirical(s: &DiffusionSampler, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = s.space().c;
        let mut h = vec![0.0; s.space().size() as usize];
        for _ in 0..n {
            h[index_of(&s.sample(&mut rng).unwrap(), c)] += 1.0 / n as f64;
        }
        h
    }

    #[test]
    fn masked_dp_matches_sampling() {
        let space = StateSpace::new(3, 2).unwrap();
        for schedule in [
            MaskingSchedule::Fixed { counts: vec![1, 2] },
            MaskingSchedule::Random { k_min: 1, k_max: 2 },
        ] {
            let s = perturbed(space, Process::Masked { schedule }, 3);
            let exact = exact_terminal_distribution(&s).unwrap();
            assert!((exact.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let emp = empirical(&s, 80_000, 4);
            for (a, b) in exact.iter().zip(&emp) {
                assert!((a - b).abs() < 0.01, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn uniform_dp_matches_sampling() {
        let space = StateSpace::new(2, 3).unwrap();
        let s = perturbed(space, Process::Uniform { kernel: UniformKernel::new(0.3, 3).unwrap() }, 5);
        let exact = exact_terminal_distribution(&s).unwrap();
        assert!((exact.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let emp = empirical(&s, 80_000, 6);
        for (a, b) in exact.iter().zip(&emp) {
            assert!((a - b).abs() < 0.01, "{a} vs {b}");
        }
    }

    #[test]
    fn noising_marginal_of_delta() {
        let space = StateSpace::new(1, 2).unwrap();
        let k = UniformKernel::new(0.25, 2).unwrap();
        let m = uniform_noising_marginal(space, &k, &[1.0, 0.0]).unwrap();
        // two flips: stay = 0.75² + 0.25²
        assert!((m[0] - 0.625).abs() < 1e-15);
        assert!((m[1] - 0.375).abs() < 1e-15);
    }
}
