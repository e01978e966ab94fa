//! Evaluation: ELBO/EUBO bounds on `log Z`, entropic optimal transport,
//! MMD, lattice magnetisation and correlation errors, and TV to exact tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSampler, Trajectory};
use crate::error::{Error, Result};
use crate::nn::log_sum_exp;
use crate::objectives::log_importance_weight;
use crate::rng::{self, tag};
use crate::targets::{Energy, EnumerationOracle};

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::config("an estimate needs at least two values"));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self { mean, se: (var / n).sqrt() })
    }
}

fn attach_energies(target: &dyn Energy, trajs: &mut [Trajectory]) -> Result<()> {
    let terminals: Vec<Vec<u8>> = trajs.iter().map(|t| t.terminal().to_vec()).collect();
    for (t, e) in trajs.iter_mut().zip(target.energies(&terminals)?) {
        t.terminal_energy = Some(e);
    }
    Ok(())
}

/// `M` forward trajectories, each on its own stream keyed by `(seed, tags, m)`.
pub fn forward_batch(sampler: &DiffusionSampler, m: usize, seed: u64, tags: &[u64]) -> Result<Vec<Trajectory>> {
    (0..m)
        .into_par_iter()
        .map(|i| {
            let mut key = tags.to_vec();
            key.push(i as u64);
            sampler.rollout_forward(&mut rng::stream(seed, &key))
        })
        .collect()
}

/// Backward trajectories from the given terminal states.
pub fn backward_batch(
    sampler: &DiffusionSampler,
    terminals: &[Vec<u8>],
    seed: u64,
    tags: &[u64],
) -> Result<Vec<Trajectory>> {
    terminals
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut key = tags.to_vec();
            key.push(i as u64);
            sampler.rollout_backward(x, &mut rng::stream(seed, &key))
        })
        .collect()
}

/// Mean log importance weight over fresh forward trajectories; a lower bound on `log Z`.
pub fn elbo(sampler: &DiffusionSampler, target: &dyn Energy, m_eval: usize, seed: u64) -> Result<Estimate> {
    let mut trajs = forward_batch(sampler, m_eval, seed, &[tag::EVAL, 0])?;
    attach_energies(target, &mut trajs)?;
    let lw = trajs.iter().map(log_importance_weight).collect::<Result<Vec<_>>>()?;
    Estimate::from_values(&lw)
}

/// Mean log importance weight over backward trajectories from true samples;
/// an upper bound on `log Z`.
pub fn eubo(
    sampler: &DiffusionSampler,
    target: &dyn Energy,
    true_samples: &[Vec<u8>],
    seed: u64,
) -> Result<Estimate> {
    if true_samples.is_empty() {
        return Err(Error::config("EUBO needs samples from the target"));
    }
    let mut trajs = backward_batch(sampler, true_samples, seed, &[tag::EVAL, 1])?;
    attach_energies(target, &mut trajs)?;
    let lw = trajs.iter().map(log_importance_weight).collect::<Result<Vec<_>>>()?;
    Estimate::from_values(&lw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundMetric {
    Hamming,
    /// Euclidean distance between decoded real vectors.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 1e-3, max_iter: 20_000, tol: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// Transport cost `⟨P, C⟩` of the regularised plan.
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// L1 violation of the row marginal at exit.
    pub violation: f64,
}

pub fn hamming(a: &[u8], b: &[u8]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn cost_matrix<T: Sync>(a: &[T], b: &[T], dist: impl Fn(&T, &T) -> f64 + Sync) -> Vec<f64> {
    a.par_iter().flat_map_iter(|x| b.iter().map(|y| dist(x, y)).collect::<Vec<_>>()).collect()
}

/// Entropic optimal transport between uniform marginals over the rows and
/// columns of the `n x m` row-major `cost`. Runs log-domain iterations while
/// halving the regularisation down to `cfg.epsilon`, warm-starting each stage.
/// Over-relaxation factor for the potential updates.
const OMEGA: f64 = 1.8;
const STAGE_ITERS: usize = 200;

pub fn sinkhorn_cost(cost: &[f64], n: usize, m: usize, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    if n == 0 || m == 0 || cost.len() != n * m {
        return Err(Error::domain(format!("cost has {} entries, expected {n} x {m}", cost.len())));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::config("Sinkhorn regularisation must be positive"));
    }
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let (mut f, mut g) = (vec![0.0; n], vec![0.0; m]);
    let max_cost = cost.iter().cloned().fold(0.0, f64::max);
    let mut eps = max_cost.max(cfg.epsilon);
    let mut iterations = 0;
    let mut violation;

    let update_f = |f: &mut Vec<f64>, g: &[f64], eps: f64| {
        f.par_iter_mut().enumerate().for_each(|(i, fi)| {
            let row = &cost[i * m..(i + 1) * m];
            let terms: Vec<f64> = row.iter().zip(g).map(|(c, gj)| (gj - c) / eps + log_b).collect();
            *fi = (1.0 - OMEGA) * *fi + OMEGA * -eps * log_sum_exp(&terms);
        });
    };
    let update_g = |g: &mut Vec<f64>, f: &[f64], eps: f64| {
        g.par_iter_mut().enumerate().for_each(|(j, gj)| {
            let terms: Vec<f64> = (0..n).map(|i| (f[i] - cost[i * m + j]) / eps + log_a).collect();
            *gj = (1.0 - OMEGA) * *gj + OMEGA * -eps * log_sum_exp(&terms);
        });
    };
    let row_violation = |f: &[f64], g: &[f64], eps: f64| -> f64 {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let row = &cost[i * m..(i + 1) * m];
                let mass: f64 = row
                    .iter()
                    .zip(g)
                    .map(|(c, gj)| ((f[i] + gj - c) / eps + log_a + log_b).exp())
                    .sum();
                (mass - 1.0 / n as f64).abs()
            })
            .sum()
    };

    loop {
        let last_stage = eps <= cfg.epsilon;
        // intermediate stages only warm-start the next one
        let stage_tol = if last_stage { cfg.tol } else { cfg.tol.max(1e-4) };
        let stage_end = if last_stage { cfg.max_iter } else { (iterations + STAGE_ITERS).min(cfg.max_iter) };
        loop {
            update_f(&mut f, &g, eps);
            update_g(&mut g, &f, eps);
            iterations += 1;
            violation = row_violation(&f, &g, eps);
            if violation < stage_tol || iterations >= stage_end {
                break;
            }
        }
        if last_stage || iterations >= cfg.max_iter {
            break;
        }
        eps = (eps / 2.0).max(cfg.epsilon);
    }
    // normalising by the plan's mass removes the residual marginal error from the cost
    let (weighted, mass) = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = &cost[i * m..(i + 1) * m];
            row.iter().zip(&g).fold((0.0, 0.0), |(wc, wm), (c, gj)| {
                let p = ((f[i] + gj - c) / eps + log_a + log_b).exp();
                (wc + c * p, wm + p)
            })
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(SinkhornResult {
        cost: weighted / mass,
        converged: violation < cfg.tol && eps <= cfg.epsilon,
        iterations,
        violation,
    })
}

/// Sinkhorn cost between two discrete sample sets under the Hamming metric.
pub fn sinkhorn_hamming(a: &[Vec<u8>], b: &[Vec<u8>], cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    let cost = cost_matrix(a, b, |x, y| hamming(x, y));
    sinkhorn_cost(&cost, a.len(), b.len(), cfg)
}

/// Sinkhorn cost between two real-valued sample sets under the Euclidean metric.
pub fn sinkhorn_l2(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    let cost = cost_matrix(a, b, |x, y| euclidean(x, y));
    sinkhorn_cost(&cost, a.len(), b.len(), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub value: f64,
    pub bandwidth: f64,
    /// The pooled median distance was zero and bandwidth 1 was used instead.
    pub fallback: bool,
}

/// Square root of the biased squared-MMD estimate with a Gaussian kernel whose
/// bandwidth is the median pairwise distance of the pooled samples.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MmdResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("MMD needs two non-empty sample sets"));
    }
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut dists: Vec<f64> = (0..pooled.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let p = &pooled;
            (i + 1..p.len()).map(move |j| euclidean(p[i], p[j]))
        })
        .collect();
    let median = if dists.is_empty() {
        0.0
    } else {
        let mid = dists.len() / 2;
        let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
        *m
    };
    let fallback = !(median > 0.0);
    let bandwidth = if fallback { 1.0 } else { median };
    let kmean = |x: &[Vec<f64>], y: &[Vec<f64>]| -> f64 {
        let s: f64 = x
            .par_iter()
            .map(|u| y.iter().map(|v| (-euclidean(u, v).powi(2) / (2.0 * bandwidth * bandwidth)).exp()).sum::<f64>())
            .sum();
        s / (x.len() * y.len()) as f64
    };
    let sq = kmean(a, a) + kmean(b, b) - 2.0 * kmean(a, b);
    Ok(MmdResult { value: sq.max(0.0).sqrt(), bandwidth, fallback })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatticeModel {
    /// Symbols 0 and 1 read as spins -1 and +1.
    Ising,
    Potts { q: usize },
}

fn check_lattice(samples: &[Vec<u8>], side: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::domain("empty sample batch"));
    }
    if let Some(x) = samples.iter().find(|x| x.len() != side * side) {
        return Err(Error::config(format!("sample of length {} is not a {side}x{side} lattice", x.len())));
    }
    Ok(())
}

fn site_magnetisation(samples: &[Vec<u8>], side: usize, model: LatticeModel) -> Vec<f64> {
    let n = samples.len() as f64;
    (0..side * side)
        .map(|i| match model {
            LatticeModel::Ising => samples.iter().map(|x| if x[i] == 0 { -1.0 } else { 1.0 }).sum::<f64>() / n,
            LatticeModel::Potts { q } => {
                let mut counts = vec![0usize; q];
                for x in samples {
                    counts[x[i] as usize] += 1;
                }
                let max = *counts.iter().max().unwrap() as f64;
                (q as f64 * max / n - 1.0) / (q as f64 - 1.0)
            }
        })
        .collect()
}

/// Row and column averages of the per-site magnetisation.
pub fn row_col_magnetisation(samples: &[Vec<u8>], side: usize, model: LatticeModel) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lattice(samples, side)?;
    let m = site_magnetisation(samples, side, model);
    let rows = (0..side).map(|k| (0..side).map(|c| m[k * side + c]).sum::<f64>() / side as f64).collect();
    let cols = (0..side).map(|k| (0..side).map(|r| m[r * side + k]).sum::<f64>() / side as f64).collect();
    Ok((rows, cols))
}

pub fn magnetisation_error(
    samples: &[Vec<u8>],
    true_samples: &[Vec<u8>],
    side: usize,
    model: LatticeModel,
) -> Result<f64> {
    let (r1, c1) = row_col_magnetisation(samples, side, model)?;
    let (r2, c2) = row_col_magnetisation(true_samples, side, model)?;
    let s: f64 = (0..side).map(|k| (r1[k] - r2[k]).abs() + (c1[k] - c2[k]).abs()).sum();
    Ok(s / (2 * side) as f64)
}

/// `C^row(r)` and `C^col(r)` for offsets `r = 0..L` on the torus.
pub fn row_col_correlation(samples: &[Vec<u8>], side: usize, model: LatticeModel) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lattice(samples, side)?;
    let n = samples.len() as f64;
    let pair = |i: usize, j: usize| -> f64 {
        match model {
            LatticeModel::Ising => {
                let spin = |s: u8| if s == 0 { -1.0 } else { 1.0 };
                let (mut si, mut sj, mut sij) = (0.0, 0.0, 0.0);
                for x in samples {
                    let (a, b) = (spin(x[i]), spin(x[j]));
                    si += a;
                    sj += b;
                    sij += a * b;
                }
                sij / n - (si / n) * (sj / n)
            }
            LatticeModel::Potts { q } => {
                samples.iter().map(|x| (x[i] == x[j]) as u8 as f64).sum::<f64>() / n - 1.0 / q as f64
            }
        }
    };
    let l = side;
    let norm = (l * l) as f64;
    let rows = (0..l)
        .map(|r| {
            (0..l).flat_map(|k| (0..l).map(move |c| (k * l + c, ((k + r) % l) * l + c))).map(|(i, j)| pair(i, j)).sum::<f64>()
                / norm
        })
        .collect();
    let cols = (0..l)
        .map(|r| {
            (0..l).flat_map(|k| (0..l).map(move |row| (row * l + k, row * l + (k + r) % l))).map(|(i, j)| pair(i, j)).sum::<f64>()
                / norm
        })
        .collect();
    Ok((rows, cols))
}

pub fn correlation_error(
    samples: &[Vec<u8>],
    true_samples: &[Vec<u8>],
    side: usize,
    model: LatticeModel,
) -> Result<f64> {
    let (r1, c1) = row_col_correlation(samples, side, model)?;
    let (r2, c2) = row_col_correlation(true_samples, side, model)?;
    let s: f64 = (0..side).map(|k| (r1[k] - r2[k]).abs() + (c1[k] - c2[k]).abs()).sum();
    Ok(s / (2 * side) as f64)
}

/// Empirical distribution of `samples` over the oracle's index.
pub fn empirical(samples: &[Vec<u8>], oracle: &EnumerationOracle) -> Vec<f64> {
    let mut h = vec![0.0; oracle.len()];
    let w = 1.0 / samples.len() as f64;
    for x in samples {
        h[oracle.index_of(x)] += w;
    }
    h
}

pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn tv_to_oracle(samples: &[Vec<u8>], oracle: &EnumerationOracle) -> f64 {
    tv(&empirical(samples, oracle), oracle.probs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{MaskingSchedule, Process};
    use crate::targets::{FnEnergy, LatticeTarget, StateSpace};
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_batches_have_zero_lattice_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s: Vec<Vec<u8>> = (0..50).map(|_| (0..16).map(|_| rng.gen_range(0..3)).collect()).collect();
        for model in [LatticeModel::Ising, LatticeModel::Potts { q: 3 }] {
            let s = if model == LatticeModel::Ising {
                s.iter().map(|x| x.iter().map(|v| v % 2).collect()).collect()
            } else {
                s.clone()
            };
            assert_eq!(magnetisation_error(&s, &s, 4, model).unwrap(), 0.0);
            assert_eq!(correlation_error(&s, &s, 4, model).unwrap(), 0.0);
        }
    }

    #[test]
    fn all_up_versus_all_down() {
        let up = vec![vec![1u8; 9]; 4];
        let down = vec![vec![0u8; 9]; 4];
        assert_eq!(magnetisation_error(&up, &down, 3, LatticeModel::Ising).unwrap(), 2.0);
    }

    #[test]
    fn potts_single_state_fully_magnetised() {
        let b = vec![vec![2u8; 9]; 3];
        let (rows, cols) = row_col_magnetisation(&b, 3, LatticeModel::Potts { q: 3 }).unwrap();
        assert!(rows.iter().chain(&cols).all(|&m| (m - 1.0).abs() < 1e-15));
        let (cr, _) = row_col_correlation(&b, 3, LatticeModel::Potts { q: 3 }).unwrap();
        assert!(cr.iter().all(|&c| (c - 2.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn ising_correlation_hand_value() {
        // two samples: all +1 and all -1 → every spin pair has covariance 1
        let b = vec![vec![1u8; 4], vec![0u8; 4]];
        let (rows, cols) = row_col_correlation(&b, 2, LatticeModel::Ising).unwrap();
        assert!(rows.iter().chain(&cols).all(|&c| (c - 1.0).abs() < 1e-15));
    }

    #[test]
    fn non_lattice_samples_rejected() {
        let b = vec![vec![0u8; 5]];
        assert!(matches!(magnetisation_error(&b, &b, 2, LatticeModel::Ising), Err(Error::Config(_))));
    }

    #[test]
    fn sinkhorn_singletons_give_hamming() {
        let r = sinkhorn_hamming(&[vec![0, 1, 1, 0]], &[vec![1, 1, 0, 0]], &SinkhornConfig::default()).unwrap();
        assert!((r.cost - 2.0).abs() < 1e-12);
        assert!(r.converged);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn sinkhorn_matches_assignment_optimum() {
        // uniform 4x4 transport: the optimum sits at a permutation matrix
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let cost: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..5.0)).collect();
            let best = permutations(4)
                .iter()
                .map(|p| (0..4).map(|i| cost[i * 4 + p[i]]).sum::<f64>() / 4.0)
                .fold(f64::INFINITY, f64::min);
            let cfg = SinkhornConfig::default();
            let r = sinkhorn_cost(&cost, 4, 4, &cfg).unwrap();
            assert!(r.converged);
            // entropic gap is at most eps * (log n + log m)
            assert!(r.cost >= best - 1e-9 && r.cost <= best + cfg.epsilon * 2.0 * 4f64.ln() + 1e-9);
        }
    }

    #[test]
    fn sinkhorn_self_is_near_zero_and_below_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Vec<u8>> = (0..64).map(|_| (0..8).map(|_| rng.gen_range(0..2)).collect()).collect();
        let b: Vec<Vec<u8>> = (0..64).map(|_| (0..8).map(|_| rng.gen_range(2..4)).collect()).collect();
        let cfg = SinkhornConfig::default();
        let aa = sinkhorn_hamming(&a, &a, &cfg).unwrap();
        let ab = sinkhorn_hamming(&a, &b, &cfg).unwrap();
        assert!(aa.cost >= 0.0 && aa.cost < 1e-3);
        assert!(aa.cost <= ab.cost);
        assert!((ab.cost - 8.0).abs() < 1e-9);
    }

    #[test]
    fn sinkhorn_flags_non_convergence() {
        let cost = vec![0.0, 3.0, 1.0, 0.5];
        let r = sinkhorn_cost(&cost, 2, 2, &SinkhornConfig { epsilon: 1e-3, max_iter: 1, tol: 1e-12 }).unwrap();
        assert!(!r.converged);
    }

    #[test]
    fn mmd_two_points_closed_form() {
        let r = mmd(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap();
        assert!((r.bandwidth - 5.0).abs() < 1e-15);
        assert!((r.value - (2.0 * (1.0 - (-0.5f64).exp())).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mmd_identical_sets_and_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.gen(), rng.gen()]).collect();
        assert!(mmd(&a, &a).unwrap().value < 1e-12);
        let same = vec![vec![1.0, 1.0]; 3];
        let r = mmd(&same, &same).unwrap();
        assert!(r.fallback && r.bandwidth == 1.0);
    }

    proptest! {
        #[test]
        fn mmd_symmetric(seed: u64, n in 1usize..12, m in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-3.0..3.0)]).collect();
            let b: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.gen_range(-1.0..5.0)]).collect();
            let (x, y) = (mmd(&a, &b).unwrap().value, mmd(&b, &a).unwrap().value);
            prop_assert!(x >= 0.0 && (x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_cases() {
        let space = StateSpace::new(9, 2).unwrap();
        let oracle = EnumerationOracle::from_energies(space, vec![0.0; 512]).unwrap();
        let repeated = vec![vec![0u8; 9]; 10];
        assert!((tv_to_oracle(&repeated, &oracle) - (1.0 - 1.0 / 512.0)).abs() < 1e-12);
        assert_eq!(tv(oracle.probs(), oracle.probs()), 0.0);
        let t = LatticeTarget::ising(3, 0.6).unwrap();
        let o = EnumerationOracle::new(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<Vec<u8>> = (0..1_000_000).map(|_| o.sample(&mut rng)).collect();
        assert!(tv_to_oracle(&draws, &o) < 0.03);
    }

    #[test]
    fn uniform_policy_flat_target_elbo_closed_form() {
        // d=2 masked, one unmask per step, uniform rows, E ≡ 0:
        // log w = log(1/2) + 0 - (log(1/2) + log(1/4)) ... per path:
        // forward = ln(1/2)+ln(1/C) + ln(1)+ln(1/C), backward = ln(1/2) + ln 1
        let c = 3usize;
        let space = StateSpace::new(2, c).unwrap();
        let net = crate::nn::PolicyNet::zeros(&crate::diffusion::policy::layer_dims(space.with_mask(), &[4])).unwrap();
        let s = DiffusionSampler::from_net(space, Process::Masked { schedule: MaskingSchedule::single_step(2) }, net)
            .unwrap();
        let flat = FnEnergy::new("flat", space, |_| 0.0);
        let e = elbo(&s, &flat, 256, 0).unwrap();
        let expect = 2.0 * (c as f64).ln();
        assert!((e.mean - expect).abs() < 1e-12 && e.se < 1e-12);
        let samples = vec![vec![0u8, 2]; 8];
        let u = eubo(&s, &flat, &samples, 0).unwrap();
        assert!((u.mean - expect).abs() < 1e-12);
        assert!(matches!(eubo(&s, &flat, &[], 0), Err(Error::Config(_))));
    }

    #[test]
    fn bounds_bracket_log_z_for_a_random_policy() {
        let t = LatticeTarget::ising(2, 0.7).unwrap();
        let o = EnumerationOracle::new(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = DiffusionSampler::new(
            t.space(),
            Process::Masked { schedule: MaskingSchedule::Fixed { counts: vec![2, 2] } },
            &[8],
            &mut rng,
        )
        .unwrap();
        let lo = elbo(&s, &t, 4000, 1).unwrap();
        let truth: Vec<Vec<u8>> = (0..4000).map(|_| o.sample(&mut rng)).collect();
        let hi = eubo(&s, &t, &truth, 2).unwrap();
        assert!(lo.mean <= o.log_z() + 3.0 * lo.se);
        assert!(hi.mean >= o.log_z() - 3.0 * hi.se);
    }
}
