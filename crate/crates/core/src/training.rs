//! The training loop: interleaved on- and off-policy epochs, replay and MCMC
//! buffers, periodic MCMC exploration, temperature annealing and resumable
//! run state.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSampler, Process, Trajectory};
use crate::error::{Error, Result};
use crate::mcmc::{refine_batch, McmcKernel};
use crate::metrics::{self, backward_batch, forward_batch, Estimate};
use crate::nn::{AdamW, PolicyNet};
use crate::objectives::{log_importance_weight, loss_and_grad, LossKind};
use crate::replay::{assemble_offpolicy_batch, McmcBuffer, ReplayBuffer, ReplayEntry};
use crate::rng::{self, tag};
use crate::targets::{Energy, StateSpace, Tempered};

/// Positive rational `num/den`, written `"2"` or `"1/3"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RatioRepr", into = "String")]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RatioRepr {
    Int(u32),
    Text(String),
}

impl TryFrom<RatioRepr> for Ratio {
    type Error = String;

    fn try_from(r: RatioRepr) -> std::result::Result<Self, String> {
        match r {
            RatioRepr::Int(n) => Ratio::new(n, 1).map_err(|e| e.to_string()),
            RatioRepr::Text(s) => s.parse().map_err(|e: Error| e.to_string()),
        }
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("`{s}` is not a ratio like 2 or 1/3"));
        match s.split_once('/') {
            Some((a, b)) => Ratio::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => Ratio::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::config(format!("off-to-on ratio {num}/{den} must be positive")));
        }
        Ok(Self { num, den })
    }

    /// Whether 1-indexed epoch `i` is on-policy: on-policy epochs are spread
    /// so that every block of `num + den` epochs holds exactly `den` of them,
    /// the first epoch included.
    pub fn is_on_policy(&self, i: u64) -> bool {
        let (n, d) = (self.num as u64, self.den as u64);
        let ceil = |a: u64| (a * d).div_ceil(n + d);
        ceil(i) > ceil(i - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub kernel: McmcKernel,
    /// Exploration runs on epochs with `(i - 1) mod interval == 0`.
    pub interval: u64,
    pub steps: usize,
    /// Fraction `r` of each off-policy batch drawn from the MCMC buffer.
    pub sample_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffPolicyConfig {
    pub ratio: Ratio,
    pub buffer_capacity: usize,
    pub exploration: Option<ExplorationConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Learning rate of the scalar `c` under trajectory balance.
    #[serde(default = "default_c_lr")]
    pub c_lr: f64,
    #[serde(default)]
    pub anneal: bool,
    /// `None` trains purely on-policy.
    #[serde(default)]
    pub off_policy: Option<OffPolicyConfig>,
    /// Evaluate every this many epochs (and after the last); 0 disables.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_m_eval")]
    pub m_eval: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_c_lr() -> f64 {
    0.1
}

fn default_m_eval() -> usize {
    2048
}

impl TrainConfig {
    /// Every violated constraint, joined.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be at least 1".into());
        }
        if self.loss == LossKind::Lv && self.batch_size < 2 {
            bad.push("log-variance loss needs batch_size >= 2".into());
        }
        if !(self.lr > 0.0) {
            bad.push(format!("lr={} must be positive", self.lr));
        }
        if !(self.c_lr > 0.0) {
            bad.push(format!("c_lr={} must be positive", self.c_lr));
        }
        if self.weight_decay < 0.0 {
            bad.push("weight_decay must be non-negative".into());
        }
        if self.eval_every > 0 && self.m_eval < 2 {
            bad.push("m_eval must be at least 2".into());
        }
        if let Some(op) = &self.off_policy {
            if op.buffer_capacity == 0 {
                bad.push("buffer_capacity must be at least 1".into());
            }
            if op.ratio.num == 0 || op.ratio.den == 0 {
                bad.push("off-to-on ratio must be positive".into());
            }
            if let Some(ex) = &op.exploration {
                if ex.interval == 0 {
                    bad.push("MCMC interval must be at least 1".into());
                }
                if !(0.0..=1.0).contains(&ex.sample_ratio) {
                    bad.push(format!("MCMC sample ratio {} outside [0, 1]", ex.sample_ratio));
                }
                if let McmcKernel::Mh { h: 0 } = ex.kernel {
                    bad.push("Hamming-ball radius must be at least 1".into());
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn is_on_policy(&self, epoch: u64) -> bool {
        match &self.off_policy {
            None => true,
            Some(op) => op.ratio.is_on_policy(epoch),
        }
    }

    pub fn is_exploration_epoch(&self, epoch: u64) -> bool {
        matches!(&self.off_policy, Some(OffPolicyConfig { exploration: Some(ex), .. }) if (epoch - 1) % ex.interval == 0)
    }

    pub fn anneal_beta(&self, epoch: u64) -> f64 {
        if self.anneal {
            anneal_beta(epoch, self.epochs)
        } else {
            1.0
        }
    }
}

/// Inverse-temperature multiplier rising linearly from 0 at epoch 1 to 1 at
/// the halfway point.
pub fn anneal_beta(epoch: u64, total: u64) -> f64 {
    (2.0 * (epoch.saturating_sub(1)) as f64 / total as f64).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub on_policy: bool,
    pub loss: f64,
    pub c: f64,
    pub beta: f64,
    pub mean_log_ratio: f64,
    pub elbo: Option<Estimate>,
    pub eubo: Option<Estimate>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,policy,loss,c,beta,mean_log_ratio,elbo,elbo_se,eubo,eubo_se";

    pub fn csv_row(&self) -> String {
        let opt = |e: Option<Estimate>| match e {
            Some(e) => format!("{},{}", e.mean, e.se),
            None => ",".into(),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            if self.on_policy { "on" } else { "off" },
            self.loss,
            self.c,
            self.beta,
            self.mean_log_ratio,
            opt(self.elbo),
            opt(self.eubo)
        )
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Completed epochs.
    pub epoch: u64,
    pub sampler: DiffusionSampler,
    pub optimiser: AdamW,
    /// Trajectory-balance offset; `-c` estimates `log Z` at the optimum.
    pub c: f64,
    pub replay: Option<ReplayBuffer>,
    pub mcmc: Option<McmcBuffer>,
    pub history: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    version: u32,
    epoch: u64,
    space: StateSpace,
    process: Process,
    c: f64,
    adam_step: u64,
    adam_first: Vec<f64>,
    adam_second: Vec<f64>,
    history: Vec<EpochLog>,
}

impl RunState {
    pub fn new(cfg: &TrainConfig, sampler: DiffusionSampler) -> Result<Self> {
        cfg.validate()?;
        let n = sampler.net().param_count();
        let (replay, mcmc) = match &cfg.off_policy {
            Some(op) => (Some(ReplayBuffer::new(op.buffer_capacity)?), Some(McmcBuffer::new(op.buffer_capacity)?)),
            None => (None, None),
        };
        Ok(Self {
            epoch: 0,
            sampler,
            optimiser: AdamW::new(n, cfg.lr, cfg.weight_decay),
            c: 0.0,
            replay,
            mcmc,
            history: Vec::new(),
        })
    }

    /// Writes `state.json`, `net.bin` and buffer snapshots into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (first, second) = self.optimiser.moments();
        let state = StateFile {
            version: 1,
            epoch: self.epoch,
            space: self.sampler.space(),
            process: self.sampler.process().clone(),
            c: self.c,
            adam_step: self.optimiser.step_count(),
            adam_first: first.to_vec(),
            adam_second: second.to_vec(),
            history: self.history.clone(),
        };
        let mut w = BufWriter::new(File::create(dir.join("state.json"))?);
        serde_json::to_writer(&mut w, &state).map_err(|e| Error::Format(e.to_string()))?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("net.bin"))?);
        self.sampler.net().write_checkpoint(&mut w)?;
        w.flush()?;
        if let Some(b) = &self.replay {
            let mut w = BufWriter::new(File::create(dir.join("replay.bin"))?);
            b.write_snapshot(&mut w)?;
            w.flush()?;
        }
        if let Some(b) = &self.mcmc {
            let mut w = BufWriter::new(File::create(dir.join("mcmc.bin"))?);
            b.write_snapshot(&mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let state: StateFile = serde_json::from_reader(BufReader::new(File::open(dir.join("state.json"))?))
            .map_err(|e| Error::Format(format!("state.json: {e}")))?;
        if state.version != 1 {
            return Err(Error::Format(format!("unsupported run state version {}", state.version)));
        }
        let net = PolicyNet::read_checkpoint(BufReader::new(File::open(dir.join("net.bin"))?))?;
        let sampler = DiffusionSampler::from_net(state.space, state.process, net)?;
        let mut optimiser = AdamW::new(sampler.net().param_count(), cfg.lr, cfg.weight_decay);
        optimiser.restore(state.adam_step, state.adam_first, state.adam_second)?;
        let read_opt = |name: &str| -> Result<Option<BufReader<File>>> {
            let p = dir.join(name);
            Ok(if p.exists() { Some(BufReader::new(File::open(p)?)) } else { None })
        };
        let replay = read_opt("replay.bin")?.map(ReplayBuffer::read_snapshot).transpose()?;
        let mcmc = read_opt("mcmc.bin")?.map(McmcBuffer::read_snapshot).transpose()?;
        if cfg.off_policy.is_some() && (replay.is_none() || mcmc.is_none()) {
            return Err(Error::Format("off-policy run state is missing its buffers".into()));
        }
        Ok(Self { epoch: state.epoch, sampler, optimiser, c: state.c, replay, mcmc, history: state.history })
    }
}

/// Runs epochs of the training loop against a target.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    target: &'a dyn Energy,
    true_samples: Option<Vec<Vec<u8>>>,
    state: RunState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, target: &'a dyn Energy, sampler: DiffusionSampler) -> Result<Self> {
        if target.space().d != sampler.space().d || target.space().c != sampler.space().c {
            return Err(Error::config(format!(
                "target space {:?} differs from sampler space {:?}",
                target.space(),
                sampler.space()
            )));
        }
        let state = RunState::new(&cfg, sampler)?;
        Ok(Self { cfg, target, true_samples: None, state })
    }

    pub fn resume(cfg: TrainConfig, target: &'a dyn Energy, state: RunState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, target, true_samples: None, state })
    }

    /// Samples from the target, enabling EUBO during evaluation.
    pub fn with_true_samples(mut self, samples: Vec<Vec<u8>>) -> Self {
        self.true_samples = Some(samples);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    fn with_energies(&self, target: &dyn Energy, mut trajs: Vec<Trajectory>) -> Result<Vec<Trajectory>> {
        let terminals: Vec<Vec<u8>> = trajs.iter().map(|t| t.terminal().to_vec()).collect();
        let energies = target.energies(&terminals)?;
        for (t, e) in trajs.iter_mut().zip(energies) {
            if !e.is_finite() {
                return Err(Error::Training(format!("target energy {e} is not finite")));
            }
            t.terminal_energy = Some(e);
        }
        Ok(trajs)
    }

    /// Runs one epoch. On error the state is left as it was before the epoch.
    pub fn step_epoch(&mut self) -> Result<&EpochLog> {
        let i = self.state.epoch + 1;
        let seed = self.cfg.seed;
        let m = self.cfg.batch_size;
        let beta = self.cfg.anneal_beta(i);
        let tempered = Tempered { inner: self.target, beta };
        let on_policy = self.cfg.is_on_policy(i);
        let sampler = &self.state.sampler;

        let batch = if on_policy {
            self.with_energies(&tempered, forward_batch(sampler, m, seed, &[tag::ON_POLICY, i])?)?
        } else {
            let replay = self.state.replay.as_ref().expect("off-policy epochs have a replay buffer");
            let mcmc = self.state.mcmc.as_ref().expect("off-policy epochs have an MCMC buffer");
            if replay.is_empty() {
                return Err(Error::State("off-policy epoch before any on-policy epoch filled the buffer".into()));
            }
            let ratio = self.cfg.off_policy.as_ref().and_then(|o| o.exploration).map_or(0.0, |e| e.sample_ratio);
            let mut rng = rng::stream(seed, &[tag::OFF_POLICY, i]);
            let terminals = assemble_offpolicy_batch(replay, mcmc, m, ratio, &mut rng)?;
            self.with_energies(&tempered, backward_batch(sampler, &terminals, seed, &[tag::OFF_POLICY, i, 1])?)?
        };

        let lg = loss_and_grad(sampler, &batch, self.cfg.loss, self.state.c)?;
        if !lg.loss.is_finite() {
            return Err(Error::Training(format!("loss {} at epoch {i}", lg.loss)));
        }

        // all fallible work happens before any state is mutated
        let mut replay = self.state.replay.clone();
        if on_policy {
            if let Some(b) = replay.as_mut() {
                let entries = batch
                    .iter()
                    .map(|t| {
                        Ok(ReplayEntry { state: t.terminal().to_vec(), log_w: log_importance_weight(t)?, epoch: i })
                    })
                    .collect::<Result<Vec<_>>>()?;
                b.insert_batch(entries)?;
            }
        }
        let mut mcmc = self.state.mcmc.clone();
        if self.cfg.is_exploration_epoch(i) {
            let ex = self.cfg.off_policy.as_ref().and_then(|o| o.exploration).expect("exploration configured");
            let b = replay.as_ref().expect("exploration needs a replay buffer");
            if !b.is_empty() {
                let mut rng = rng::stream(seed, &[tag::BUFFER, i]);
                let starts: Vec<Vec<u8>> = b.sample_prioritised(m, &mut rng)?.into_iter().map(|e| e.state.clone()).collect();
                let refined = refine_batch(&ex.kernel, &tempered, starts, ex.steps, seed, &[tag::MCMC, i])?;
                mcmc.as_mut().expect("exploration needs an MCMC buffer").insert_batch(refined);
            }
        }
        let mut sampler = self.state.sampler.clone();
        let mut optimiser = self.state.optimiser.clone();
        optimiser.step(sampler.net_mut().params_mut(), &lg.grad)?;
        let c = match self.cfg.loss {
            LossKind::Tb => self.state.c - self.cfg.c_lr * lg.dc,
            LossKind::Lv => lg.c,
        };

        let mut log = EpochLog {
            epoch: i,
            on_policy,
            loss: lg.loss,
            c,
            beta,
            mean_log_ratio: lg.log_ratios.iter().sum::<f64>() / lg.log_ratios.len() as f64,
            elbo: None,
            eubo: None,
        };
        let eval_now = self.cfg.eval_every > 0 && (i % self.cfg.eval_every == 0 || i == self.cfg.epochs);
        if eval_now {
            let (elbo, eubo) = evaluate(&sampler, self.target, self.true_samples.as_deref(), self.cfg.m_eval, seed ^ i)?;
            log.elbo = Some(elbo);
            log.eubo = eubo;
        }

        self.state.sampler = sampler;
        self.state.optimiser = optimiser;
        self.state.c = c;
        self.state.replay = replay;
        self.state.mcmc = mcmc;
        self.state.epoch = i;
        self.state.history.push(log);
        Ok(self.state.history.last().expect("just pushed"))
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&RunState) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.step_epoch()?;
            on_epoch(&self.state)?;
        }
        Ok(())
    }
}

/// The sampler used for evaluation: masked samplers unmask one position per step.
pub fn evaluation_sampler(sampler: &DiffusionSampler) -> Result<DiffusionSampler> {
    match sampler.process() {
        Process::Masked { .. } => sampler.retimed_single_step(),
        Process::Uniform { .. } => Ok(sampler.clone()),
    }
}

/// ELBO and, when target samples are available, EUBO of the evaluation sampler.
pub fn evaluate(
    sampler: &DiffusionSampler,
    target: &dyn Energy,
    true_samples: Option<&[Vec<u8>]>,
    m_eval: usize,
    seed: u64,
) -> Result<(Estimate, Option<Estimate>)> {
    let eval = evaluation_sampler(sampler)?;
    let elbo = metrics::elbo(&eval, target, m_eval, seed)?;
    let eubo = true_samples.map(|s| metrics::eubo(&eval, target, s, seed)).transpose()?;
    Ok((elbo, eubo))
}
