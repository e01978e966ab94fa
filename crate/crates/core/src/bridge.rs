//! Data-to-energy Schrödinger bridges by iterative proportional fitting.
//!
//! A forward kernel carries samples of a data distribution `p_0` to the
//! target density, a backward kernel carries target samples back. Each outer
//! iteration fits the backward kernel by maximum likelihood on forward paths
//! started from data, then fits the forward kernel by a per-start log-variance
//! loss against the backward kernel and the target energy. Both kernels start
//! at the uniform reference process.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{propagate_uniform, DiffusionSampler, Process, Trajectory, UniformKernel};
use crate::error::{Error, Result};
use crate::mcmc::{refine_batch, McmcKernel};
use crate::metrics::tv;
use crate::nn::{AdamW, PolicyNet, Tape};
use crate::objectives::{second_moment, LossKind};
use crate::replay::McmcBuffer;
use crate::rng::{self, tag};
use crate::targets::{Energy, EnumerationOracle, StateSpace};

/// Largest space on which per-iteration marginals are computed exactly.
pub const DIAGNOSTIC_LIMIT: u128 = 1 << 10;

/// Moving-average window of the early-exit rule.
pub const PLATEAU_WINDOW: usize = 50;

/// Off-policy forward fitting: the first trajectory of every other group
/// starts from an MCMC-refined terminal state and runs backward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeOffPolicy {
    pub buffer_capacity: usize,
    pub mcmc: McmcKernel,
    pub mcmc_steps: usize,
    /// States drawn from the terminal buffer and refined once per outer iteration.
    pub refresh: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    pub iterations: usize,
    pub k_traj: usize,
    /// Trajectory groups (shared start) per forward gradient step.
    pub groups: usize,
    /// Paths per backward gradient step.
    pub backward_batch: usize,
    pub forward_steps: usize,
    pub backward_steps: usize,
    /// Relative moving-average improvement below which a half-iteration
    /// stops early; `None` (the default) always spends the full budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    pub lr: f64,
    /// Decay the learning rate linearly to zero over each half-iteration's budget.
    #[serde(default)]
    pub lr_decay: bool,
    pub kernel: UniformKernel,
    #[serde(default)]
    pub off_policy: Option<BridgeOffPolicy>,
    #[serde(default)]
    pub seed: u64,
}

fn step_lr(cfg: &BridgeConfig, step: usize, budget: usize) -> f64 {
    if cfg.lr_decay {
        cfg.lr * (1.0 - step as f64 / budget as f64)
    } else {
        cfg.lr
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.k_traj < 2 {
            bad.push(format!("k_traj={} must be at least 2", self.k_traj));
        }
        if self.groups == 0 || self.backward_batch == 0 {
            bad.push("groups and backward_batch must be at least 1".to_string());
        }
        if !(self.lr > 0.0) {
            bad.push(format!("lr={} must be positive", self.lr));
        }
        if let Some(t) = self.tolerance {
            if !(t >= 0.0) {
                bad.push("tolerance must be non-negative".into());
            }
        }
        if let Err(e) = self.kernel.validate() {
            bad.push(e.to_string());
        }
        if let Some(op) = &self.off_policy {
            if op.buffer_capacity == 0 {
                bad.push("buffer_capacity must be at least 1".into());
            }
            if let McmcKernel::Mh { h: 0 } = op.mcmc {
                bad.push("Hamming-ball radius must be at least 1".into());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Distribution of the data endpoint.
#[derive(Debug, Clone)]
pub enum Marginal {
    Point(Vec<u8>),
    /// Uniform over the listed states (repeats count).
    Empirical(Vec<Vec<u8>>),
    Oracle(EnumerationOracle),
}

impl Marginal {
    pub fn check(&self, space: StateSpace) -> Result<()> {
        match self {
            Marginal::Point(x) => space.check(x),
            Marginal::Empirical(xs) => {
                if xs.is_empty() {
                    return Err(Error::config("empirical marginal has no samples"));
                }
                xs.iter().try_for_each(|x| space.check(x))
            }
            Marginal::Oracle(o) => {
                if o.space() != space {
                    return Err(Error::config("marginal and bridge use different state spaces"));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        match self {
            Marginal::Point(x) => x.clone(),
            Marginal::Empirical(xs) => xs[rng.gen_range(0..xs.len())].clone(),
            Marginal::Oracle(o) => o.sample(rng),
        }
    }

    /// Probability table indexed like [`EnumerationOracle`].
    pub fn table(&self, space: StateSpace) -> Result<Vec<f64>> {
        self.check(space)?;
        let index = |x: &[u8]| x.iter().fold(0usize, |acc, &s| acc * space.c + s as usize);
        let n = usize::try_from(space.size()).map_err(|_| Error::Capacity {
            states: space.size(),
            limit: crate::targets::ENUMERATION_LIMIT,
        })?;
        match self {
            Marginal::Point(x) => {
                let mut t = vec![0.0; n];
                t[index(x)] = 1.0;
                Ok(t)
            }
            Marginal::Empirical(xs) => {
                let mut t = vec![0.0; n];
                for x in xs {
                    t[index(x)] += 1.0 / xs.len() as f64;
                }
                Ok(t)
            }
            Marginal::Oracle(o) => Ok(o.probs().to_vec()),
        }
    }
}

/// Forward kernel θ and backward kernel φ over the same reference process.
///
/// The backward kernel is stored as a sampler running in reversed time: its
/// step `n` maps `X_{N-n}` to `X_{N-n-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgePair {
    forward: DiffusionSampler,
    backward: DiffusionSampler,
}

impl BridgePair {
    /// Both kernels equal to the reference, with Glorot hidden layers.
    pub fn new<R: Rng + ?Sized>(
        space: StateSpace,
        kernel: UniformKernel,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let process = Process::Uniform { kernel };
        Ok(Self {
            forward: DiffusionSampler::new(space, process.clone(), hidden, rng)?,
            backward: DiffusionSampler::new(space, process, hidden, rng)?,
        })
    }

    pub fn from_samplers(forward: DiffusionSampler, backward: DiffusionSampler) -> Result<Self> {
        let pair = Self { forward, backward };
        pair.check()?;
        Ok(pair)
    }

    pub fn forward(&self) -> &DiffusionSampler {
        &self.forward
    }

    pub fn backward(&self) -> &DiffusionSampler {
        &self.backward
    }

    pub fn forward_net_mut(&mut self) -> &mut PolicyNet {
        self.forward.net_mut()
    }

    pub fn backward_net_mut(&mut self) -> &mut PolicyNet {
        self.backward.net_mut()
    }

    pub fn space(&self) -> StateSpace {
        self.forward.space()
    }

    pub fn kernel(&self) -> UniformKernel {
        match self.forward.process() {
            Process::Uniform { kernel } => *kernel,
            Process::Masked { .. } => unreachable!("bridge kernels are uniform"),
        }
    }

    fn check(&self) -> Result<()> {
        for s in [&self.forward, &self.backward] {
            if let Process::Masked { .. } = s.process() {
                return Err(Error::config("bridges need the uniform reference process"));
            }
        }
        if self.forward.space() != self.backward.space() || self.forward.process() != self.backward.process() {
            return Err(Error::config("forward and backward kernels disagree on space or reference"));
        }
        Ok(())
    }

    /// Forward path from `x0`; `log_p0` is zero (the path is conditional on its start).
    pub fn rollout_forward_from<R: Rng + ?Sized>(&self, x0: &[u8], rng: &mut R) -> Result<Trajectory> {
        self.space().check(x0)?;
        let steps = self.kernel().steps;
        let mut states = vec![x0.to_vec()];
        let mut fwd = Vec::with_capacity(steps);
        for n in 0..steps {
            let (next, lp) = self.forward.uniform_forward_step(states.last().unwrap(), n, rng)?;
            fwd.push(lp);
            states.push(next);
        }
        let mut traj = Trajectory {
            states,
            counts: Vec::new(),
            log_p0: 0.0,
            forward_log_probs: fwd,
            backward_log_probs: Vec::new(),
            terminal_energy: None,
        };
        traj.backward_log_probs = self.backward_step_log_probs(&traj)?;
        Ok(traj)
    }

    /// Backward path from `x_n` under φ, stored in forward time order.
    pub fn rollout_backward_from<R: Rng + ?Sized>(&self, x_n: &[u8], rng: &mut R) -> Result<Trajectory> {
        self.space().check(x_n)?;
        let steps = self.kernel().steps;
        let mut rev = vec![x_n.to_vec()];
        let mut bwd = Vec::with_capacity(steps);
        for n in 0..steps {
            let (prev, lp) = self.backward.uniform_forward_step(rev.last().unwrap(), n, rng)?;
            bwd.push(lp);
            rev.push(prev);
        }
        rev.reverse();
        bwd.reverse();
        let mut traj = Trajectory {
            states: rev,
            counts: Vec::new(),
            log_p0: 0.0,
            forward_log_probs: Vec::new(),
            backward_log_probs: bwd,
            terminal_energy: None,
        };
        traj.forward_log_probs = self.forward.forward_step_log_probs(&traj)?;
        Ok(traj)
    }

    fn reversed(traj: &Trajectory) -> Trajectory {
        Trajectory {
            states: traj.states.iter().rev().cloned().collect(),
            counts: Vec::new(),
            log_p0: 0.0,
            forward_log_probs: Vec::new(),
            backward_log_probs: Vec::new(),
            terminal_energy: None,
        }
    }

    /// `log p←_φ(X_n | X_{n+1})` per step, in forward time order.
    pub fn backward_step_log_probs(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let mut v = self.backward.forward_step_log_probs(&Self::reversed(traj))?;
        v.reverse();
        Ok(v)
    }

    /// `log p←_φ(τ | X_N)`.
    pub fn backward_log_likelihood(&self, traj: &Trajectory) -> Result<f64> {
        Ok(self.backward_step_log_probs(traj)?.iter().sum())
    }

    /// Exact `X_N` marginal of forward paths started from `initial`.
    pub fn forward_marginal(&self, initial: &[f64]) -> Result<Vec<f64>> {
        propagate_uniform(&self.forward, initial)
    }

    /// Exact `X_0` marginal of backward paths started from `terminal`.
    pub fn backward_marginal(&self, terminal: &[f64]) -> Result<Vec<f64>> {
        propagate_uniform(&self.backward, terminal)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, s) in [("forward.bin", &self.forward), ("backward.bin", &self.backward)] {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            s.net().write_checkpoint(&mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, space: StateSpace, kernel: UniformKernel) -> Result<Self> {
        let read = |name: &str| -> Result<DiffusionSampler> {
            let net = PolicyNet::read_checkpoint(BufReader::new(File::open(dir.join(name))?))?;
            DiffusionSampler::from_net(space, Process::Uniform { kernel }, net)
        };
        Self::from_samplers(read("forward.bin")?, read("backward.bin")?)
    }
}

/// Budget spent and losses seen by one half-iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    pub steps: usize,
    pub losses: Vec<f64>,
}

impl FitReport {
    /// Mean over the final window (or all steps when fewer).
    pub fn final_loss(&self) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let tail = &self.losses[self.losses.len().saturating_sub(PLATEAU_WINDOW)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// True once the last window's mean improves on the one before by less
/// than `tol`, relative.
pub fn plateaued(losses: &[f64], window: usize, tol: f64) -> bool {
    let n = losses.len();
    if window == 0 || n < 2 * window {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&losses[n - 2 * window..n - window]);
    let cur = mean(&losses[n - window..]);
    (prev - cur) / prev.abs().max(1e-12) < tol
}

fn sum_grads(params: usize, grads: Vec<Vec<f64>>) -> Vec<f64> {
    let mut out = vec![0.0; params];
    for g in &grads {
        for (a, b) in out.iter_mut().zip(g) {
            *a += b;
        }
    }
    out
}

/// Negative mean backward log-likelihood of `paths` and its gradient in φ.
pub fn backward_nll_and_grad(pair: &BridgePair, paths: &[Trajectory]) -> Result<(f64, Vec<f64>)> {
    if paths.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let params = pair.backward.net().params();
    let m = paths.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = paths
        .par_iter()
        .map(|traj| {
            let mut tape = Tape::new(params);
            let rev = BridgePair::reversed(traj);
            let ll = pair.backward.forward_log_prob_on_tape(&mut tape, &rev)?;
            // the sampler adds its own uniform start term; only the steps matter here
            let value = pair.backward.forward_step_log_probs(&rev)?.iter().sum::<f64>();
            if !value.is_finite() {
                return Err(Error::Training("non-finite backward likelihood".into()));
            }
            Ok((value, tape.backward_seeded(ll, -1.0 / m)?))
        })
        .collect::<Result<_>>()?;
    let nll = -parts.iter().map(|p| p.0).sum::<f64>() / m;
    let grad = sum_grads(params.len(), parts.into_iter().map(|p| p.1).collect());
    Ok((nll, grad))
}

/// Maximum-likelihood fit of the backward kernel to forward paths from `p0`,
/// with the forward kernel held fixed. `stream` distinguishes calls.
pub fn fit_backward_mle(
    pair: &mut BridgePair,
    p0: &Marginal,
    cfg: &BridgeConfig,
    budget: usize,
    stream: u64,
) -> Result<FitReport> {
    pair.check()?;
    p0.check(pair.space())?;
    let mut opt = AdamW::new(pair.backward.net().param_count(), cfg.lr, 0.0);
    let mut report = FitReport::default();
    for step in 0..budget {
        let paths: Vec<Trajectory> = (0..cfg.backward_batch)
            .into_par_iter()
            .map(|j| {
                let mut rng = rng::stream(cfg.seed, &[tag::BRIDGE_BACKWARD, stream, step as u64, j as u64]);
                let x0 = p0.sample(&mut rng);
                pair.rollout_forward_from(&x0, &mut rng)
            })
            .collect::<Result<_>>()?;
        let (nll, grad) = backward_nll_and_grad(pair, &paths)?;
        opt.lr = step_lr(cfg, step, budget);
        opt.step(pair.backward.net_mut().params_mut(), &grad)?;
        report.losses.push(nll);
        report.steps = step + 1;
        if cfg.tolerance.is_some_and(|t| plateaued(&report.losses, PLATEAU_WINDOW, t)) {
            break;
        }
    }
    Ok(report)
}

/// One group's log-ratios `log p→_θ(τ|x_0) - log p←_φ(τ|x_N) + E(x_N)`.
pub fn group_log_ratios(group: &[Trajectory]) -> Result<Vec<f64>> {
    group
        .iter()
        .map(|t| {
            let e = t.terminal_energy.ok_or_else(|| Error::domain("trajectory has no terminal energy"))?;
            Ok(t.forward_log_prob() - t.backward_log_prob() + e)
        })
        .collect()
}

/// Variance over a group of log-ratios (population form).
pub fn group_lv(log_ratios: &[f64]) -> Result<f64> {
    Ok(second_moment(log_ratios, LossKind::Lv, 0.0)?.loss)
}

/// Mean group variance and its gradient in θ; every group needs at least two paths.
pub fn forward_lv_and_grad(pair: &BridgePair, groups: &[Vec<Trajectory>]) -> Result<(f64, Vec<f64>)> {
    if groups.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let params = pair.forward.net().params();
    let g = groups.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = groups
        .par_iter()
        .map(|group| {
            let lrs = group_log_ratios(group)?;
            let sm = second_moment(&lrs, LossKind::Lv, 0.0)?;
            let mut grad = vec![0.0; params.len()];
            for (traj, seed) in group.iter().zip(&sm.seeds) {
                let mut tape = Tape::new(params);
                let lp = pair.forward.forward_log_prob_on_tape(&mut tape, traj)?;
                tape.accumulate_grad(lp, seed / g, &mut grad)?;
            }
            Ok((sm.loss, grad))
        })
        .collect::<Result<_>>()?;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / g;
    let grad = sum_grads(params.len(), parts.into_iter().map(|p| p.1).collect());
    Ok((loss, grad))
}

/// Buffers of the off-policy forward fit.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeBuffers {
    /// Terminal states of on-policy forward paths.
    pub terminal: McmcBuffer,
    /// MCMC-refined terminal states.
    pub mcmc: McmcBuffer,
}

impl BridgeBuffers {
    pub fn new(capacity: usize) -> Result<Self> {
        Ok(Self { terminal: McmcBuffer::new(capacity)?, mcmc: McmcBuffer::new(capacity)? })
    }
}

/// Evaluates all terminal energies in one batch (one round trip for remote targets).
fn attach_energies<'t>(trajs: impl Iterator<Item = &'t mut Trajectory>, target: &dyn Energy) -> Result<()> {
    let mut trajs: Vec<&mut Trajectory> = trajs.collect();
    let terminals: Vec<Vec<u8>> = trajs.iter().map(|t| t.terminal().to_vec()).collect();
    for (t, e) in trajs.iter_mut().zip(target.energies(&terminals)?) {
        if !e.is_finite() {
            return Err(Error::Training("non-finite terminal energy".into()));
        }
        t.terminal_energy = Some(e);
    }
    Ok(())
}

/// Log-variance fit of the forward kernel with the backward kernel held
/// fixed. With buffers, odd steps start each group from a backward path
/// out of an MCMC-buffer state once that buffer has content.
pub fn fit_forward_lv(
    pair: &mut BridgePair,
    p0: &Marginal,
    target: &dyn Energy,
    cfg: &BridgeConfig,
    budget: usize,
    mut buffers: Option<&mut BridgeBuffers>,
    stream: u64,
) -> Result<FitReport> {
    if cfg.k_traj < 2 {
        return Err(Error::config(format!("k_traj={} must be at least 2", cfg.k_traj)));
    }
    pair.check()?;
    p0.check(pair.space())?;
    if target.space() != pair.space() {
        return Err(Error::config("target and bridge use different state spaces"));
    }
    let mut opt = AdamW::new(pair.forward.net().param_count(), cfg.lr, 0.0);
    let mut report = FitReport::default();
    for step in 0..budget {
        let off_starts: Option<Vec<Vec<u8>>> = match buffers.as_deref() {
            Some(b) if step % 2 == 1 && !b.mcmc.is_empty() => {
                let mut rng = rng::stream(cfg.seed, &[tag::OFF_POLICY, stream, step as u64]);
                Some(b.mcmc.sample_uniform(cfg.groups, &mut rng)?.into_iter().cloned().collect())
            }
            _ => None,
        };
        let pair_ref = &*pair;
        let mut groups: Vec<Vec<Trajectory>> = (0..cfg.groups)
            .into_par_iter()
            .map(|g| {
                let mut rng = rng::stream(cfg.seed, &[tag::BRIDGE_FORWARD, stream, step as u64, g as u64]);
                let mut group = Vec::with_capacity(cfg.k_traj);
                let x0 = match &off_starts {
                    Some(starts) => {
                        let first = pair_ref.rollout_backward_from(&starts[g], &mut rng)?;
                        let x0 = first.initial().to_vec();
                        group.push(first);
                        x0
                    }
                    None => p0.sample(&mut rng),
                };
                while group.len() < cfg.k_traj {
                    group.push(pair_ref.rollout_forward_from(&x0, &mut rng)?);
                }
                Ok(group)
            })
            .collect::<Result<_>>()?;
        attach_energies(groups.iter_mut().flatten(), target)?;
        let (loss, grad) = forward_lv_and_grad(pair, &groups)?;
        opt.lr = step_lr(cfg, step, budget);
        opt.step(pair.forward.net_mut().params_mut(), &grad)?;
        if let (Some(b), None) = (buffers.as_deref_mut(), &off_starts) {
            b.terminal.insert_batch(groups.iter().flatten().map(|t| t.terminal().to_vec()));
        }
        report.losses.push(loss);
        report.steps = step + 1;
        if cfg.tolerance.is_some_and(|t| plateaued(&report.losses, PLATEAU_WINDOW, t)) {
            break;
        }
    }
    Ok(report)
}

/// Diagnostics recorded after each outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub backward_steps: usize,
    pub backward_loss: Option<f64>,
    pub forward_steps: usize,
    pub forward_loss: Option<f64>,
    /// TV between the forward `X_N` marginal and the target.
    pub tv_forward: Option<f64>,
    /// TV between the backward `X_0` marginal and `p_0`.
    pub tv_backward: Option<f64>,
}

impl IterationLog {
    pub const CSV_HEADER: &'static str =
        "iteration,backward_steps,backward_loss,forward_steps,forward_loss,tv_forward,tv_backward";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.backward_steps,
            opt(self.backward_loss),
            self.forward_steps,
            opt(self.forward_loss),
            opt(self.tv_forward),
            opt(self.tv_backward)
        )
    }
}

/// Exact endpoint tables for diagnostics, when the space is small enough.
pub struct ExactTables {
    pub p0: Vec<f64>,
    pub target: Vec<f64>,
}

impl ExactTables {
    pub fn new(p0: &Marginal, target: &dyn Energy) -> Result<Option<Self>> {
        let space = target.space();
        if space.size() > DIAGNOSTIC_LIMIT {
            return Ok(None);
        }
        let oracle = EnumerationOracle::new(target)?;
        Ok(Some(Self { p0: p0.table(space)?, target: oracle.probs().to_vec() }))
    }

    /// `(TV forward vs target, TV backward vs p_0)`.
    pub fn tvs(&self, pair: &BridgePair) -> Result<(f64, f64)> {
        Ok((
            tv(&pair.forward_marginal(&self.p0)?, &self.target),
            tv(&pair.backward_marginal(&self.target)?, &self.p0),
        ))
    }
}

/// Runs `cfg.iterations` outer iterations on `pair` (normally starting at
/// the reference). `on_iteration` sees the pair and the log after each one.
pub fn ipf_run(
    cfg: &BridgeConfig,
    pair: &mut BridgePair,
    p0: &Marginal,
    target: &dyn Energy,
    mut on_iteration: impl FnMut(&BridgePair, &IterationLog) -> Result<()>,
) -> Result<Vec<IterationLog>> {
    cfg.validate()?;
    pair.check()?;
    if pair.kernel() != cfg.kernel {
        return Err(Error::config("bridge pair was built for a different reference kernel"));
    }
    if target.space() != pair.space() {
        return Err(Error::config("target and bridge use different state spaces"));
    }
    p0.check(pair.space())?;
    let exact = ExactTables::new(p0, target)?;
    let mut buffers = cfg.off_policy.map(|op| BridgeBuffers::new(op.buffer_capacity)).transpose()?;
    let mut logs = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let bwd = fit_backward_mle(pair, p0, cfg, cfg.backward_steps, it as u64)?;
        if let (Some(b), Some(op)) = (buffers.as_mut(), cfg.off_policy) {
            if !b.terminal.is_empty() && op.refresh > 0 {
                let mut rng = rng::stream(cfg.seed, &[tag::BUFFER, it as u64]);
                let starts: Vec<Vec<u8>> =
                    b.terminal.sample_uniform(op.refresh, &mut rng)?.into_iter().cloned().collect();
                let refined = refine_batch(&op.mcmc, target, starts, op.mcmc_steps, cfg.seed, &[tag::MCMC, it as u64])?;
                b.mcmc.insert_batch(refined);
            }
        }
        let fwd = fit_forward_lv(pair, p0, target, cfg, cfg.forward_steps, buffers.as_mut(), it as u64)?;
        let (tv_forward, tv_backward) = match &exact {
            Some(t) => {
                let (f, b) = t.tvs(pair)?;
                (Some(f), Some(b))
            }
            None => (None, None),
        };
        let log = IterationLog {
            iteration: it,
            backward_steps: bwd.steps,
            backward_loss: bwd.final_loss(),
            forward_steps: fwd.steps,
            forward_loss: fwd.final_loss(),
            tv_forward,
            tv_backward,
        };
        on_iteration(pair, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// One iterate of tabular IPF on the endpoint joint.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularIterate {
    /// Row-major joint `π(x_0, x_N)` after the forward projection.
    pub joint: Vec<f64>,
    pub tv_forward: f64,
    pub tv_backward: f64,
}

/// Static IPF on `S x S` tables: starting from `p0(x_0) Q(x_N | x_0)`,
/// alternately rescale to the target `X_N` marginal (backward half) and the
/// `p0` `X_0` marginal (forward half). `reference` is row-major `Q(to | from)`.
pub fn tabular_ipf(p0: &[f64], target: &[f64], reference: &[f64], iterations: usize) -> Result<Vec<TabularIterate>> {
    let s = p0.len();
    if target.len() != s || reference.len() != s * s {
        return Err(Error::domain("table sizes disagree"));
    }
    let mut joint: Vec<f64> = (0..s * s).map(|k| p0[k / s] * reference[k]).collect();
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        // backward half: π_b(x0, xN) = target(xN) π_f(x0 | xN)
        let col: Vec<f64> = (0..s).map(|j| (0..s).map(|i| joint[i * s + j]).sum()).collect();
        let mut back = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                let c = if col[j] > 0.0 { joint[i * s + j] / col[j] } else { reference[j * s + i] };
                back[i * s + j] = target[j] * c;
            }
        }
        let row_b: Vec<f64> = (0..s).map(|i| back[i * s..(i + 1) * s].iter().sum()).collect();
        let tv_backward = tv(&row_b, p0);
        // forward half: π_f(x0, xN) = p0(x0) π_b(xN | x0)
        for i in 0..s {
            for j in 0..s {
                let c = if row_b[i] > 0.0 { back[i * s + j] / row_b[i] } else { reference[i * s + j] };
                joint[i * s + j] = p0[i] * c;
            }
        }
        let col_f: Vec<f64> = (0..s).map(|j| (0..s).map(|i| joint[i * s + j]).sum()).collect();
        out.push(TabularIterate { joint: joint.clone(), tv_forward: tv(&col_f, target), tv_backward });
    }
    Ok(out)
}
