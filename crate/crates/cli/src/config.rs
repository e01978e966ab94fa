//! Experiment configuration files and the shipped presets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use dsb_core::bridge::{BridgeConfig, BridgeOffPolicy};
use dsb_core::diffusion::{MaskingSchedule, Process, UniformKernel};
use dsb_core::energy_rpc::{self, Endpoint, RemoteEnergy};
use dsb_core::mcmc::{ChainConfig, McmcKernel};
use dsb_core::objectives::LossKind;
use dsb_core::targets::{
    ContinuousEnergy, Energy, FnEnergy, GaussianMixture, GrayCodeConfig, GrayTarget, LatticeParams, LatticeTarget,
    StateSpace, ENUMERATION_LIMIT,
};
use dsb_core::training::{ExplorationConfig, OffPolicyConfig, Ratio, TrainConfig};

/// A configuration problem; the binary maps it to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Save a training checkpoint every this many epochs; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Process>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net: Option<NetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeConfig>,
    /// The data endpoint of a bridge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<McmcSpec>,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_rpc: Option<RpcSpec>,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/dsb")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Ising {
        side: usize,
        beta: f64,
    },
    Potts {
        side: usize,
        q: usize,
        beta: f64,
    },
    /// A continuous energy on `[-half_width, half_width]^dims`, Gray-coded with `bits` per coordinate.
    Gray {
        dims: usize,
        bits: u32,
        half_width: f64,
        energy: GrayEnergy,
    },
    /// Energies listed for every state in lexicographic order (first position most significant).
    Table {
        d: usize,
        c: usize,
        energies: Vec<f64>,
    },
    /// Served over the energy protocol; the space comes from the handshake.
    Remote {
        #[serde(default = "default_remote_name")]
        name: String,
    },
}

fn default_remote_name() -> String {
    "remote".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GrayEnergy {
    DoubleWell,
    ManyWell,
    RotatedManyWell,
    Mixture { means: Vec<Vec<f64>> },
    /// Forty unit Gaussians with means drawn from `U[-47, 47]^D`.
    Gmm40 { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Point {
        state: Vec<u8>,
    },
    /// One state per line, symbols separated by commas.
    Samples {
        path: PathBuf,
    },
    /// Another target; exact when `samples` is absent, otherwise that many draws from it.
    Target {
        target: TargetSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        samples: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSpec {
    pub kernel: McmcKernel,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_samples_per_chain")]
    pub samples_per_chain: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
}

fn default_chains() -> usize {
    ChainConfig::default().chains
}

fn default_burn_in() -> usize {
    ChainConfig::default().burn_in
}

fn default_samples_per_chain() -> usize {
    ChainConfig::default().samples_per_chain
}

fn default_thin() -> usize {
    ChainConfig::default().thin
}

impl McmcSpec {
    pub fn new(kernel: McmcKernel) -> Self {
        let c = ChainConfig::default();
        Self { kernel, chains: c.chains, burn_in: c.burn_in, samples_per_chain: c.samples_per_chain, thin: c.thin }
    }

    pub fn chain(&self) -> ChainConfig {
        ChainConfig {
            chains: self.chains,
            burn_in: self.burn_in,
            samples_per_chain: self.samples_per_chain,
            thin: self.thin,
        }
    }

    fn violations(&self, target: &TargetSpec, bad: &mut Vec<String>, at: &str) {
        if self.chains == 0 {
            bad.push(format!("{at}.chains must be at least 1"));
        }
        if self.thin == 0 {
            bad.push(format!("{at}.thin must be at least 1"));
        }
        kernel_violations(&self.kernel, target, bad, &format!("{at}.kernel"));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Trajectories behind the ELBO and EUBO estimates.
    #[serde(default = "default_m_eval")]
    pub m_eval: usize,
    /// Model samples behind the sample-based metrics and plots.
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSpec>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { m_eval: default_m_eval(), samples: default_eval_samples(), reference: None }
    }
}

fn default_m_eval() -> usize {
    2048
}

fn default_eval_samples() -> usize {
    1024
}

/// Where samples from the target come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// Exact draws by enumeration.
    Oracle { samples: usize },
    /// Exact draws from a Gray-coded Gaussian mixture, encoded after sampling.
    Mixture { samples: usize },
    Mcmc(McmcSpec),
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RpcSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<f64>,
}

impl RpcSpec {
    pub fn endpoint(&self) -> Result<Endpoint> {
        match (&self.command, &self.addr) {
            (Some(cmd), None) => Ok(Endpoint::Command(cmd.clone())),
            (None, Some(addr)) => Ok(Endpoint::Tcp(addr.clone())),
            (Some(_), Some(_)) => Err(config_error("energy_rpc: give either command or addr, not both")),
            (None, None) => Err(config_error("energy_rpc: missing command or addr")),
        }
    }

    pub fn timeout(&self) -> Result<Duration> {
        match self.timeout_secs {
            Some(s) if s > 0.0 && s.is_finite() => Ok(Duration::from_secs_f64(s)),
            Some(s) => Err(config_error(format!("energy_rpc.timeout_secs={s} must be positive"))),
            None => Ok(energy_rpc::timeout_from_env()?),
        }
    }
}

/// Which of the mutually exclusive run blocks a config carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    Train,
    Bridge,
    Mcmc,
}

impl fmt::Display for RunKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunKind::Train => "train",
            RunKind::Bridge => "bridge",
            RunKind::Mcmc => "mcmc",
        })
    }
}

impl TargetSpec {
    /// `(d, C)` when known without contacting a server.
    pub fn static_space(&self) -> Option<(usize, usize)> {
        match self {
            TargetSpec::Ising { side, .. } => Some((side * side, 2)),
            TargetSpec::Potts { side, q, .. } => Some((side * side, *q)),
            TargetSpec::Gray { dims, bits, .. } => Some((dims * *bits as usize, 2)),
            TargetSpec::Table { d, c, .. } => Some((*d, *c)),
            TargetSpec::Remote { .. } => None,
        }
    }

    pub fn is_lattice(&self) -> bool {
        matches!(self, TargetSpec::Ising { .. } | TargetSpec::Potts { .. })
    }

    fn violations(&self, bad: &mut Vec<String>, at: &str) {
        let mut push = |e: dsb_core::Error| bad.push(format!("{at}: {e}"));
        match self {
            TargetSpec::Ising { side, beta } => {
                if let Err(e) = (LatticeParams { side: *side, q: 2, j: 0.5, beta: *beta }).validate() {
                    push(e);
                }
            }
            TargetSpec::Potts { side, q, beta } => {
                if let Err(e) = (LatticeParams { side: *side, q: *q, j: 1.0, beta: *beta }).validate() {
                    push(e);
                }
            }
            TargetSpec::Gray { dims, bits, half_width, energy } => {
                let g = GrayCodeConfig { dims: *dims, bits: *bits, half_width: *half_width };
                if let Err(e) = g.validate() {
                    push(e);
                }
                match energy.build(*dims) {
                    Ok(ce) => {
                        if let Err(e) = ce.check_dim(*dims) {
                            push(e);
                        }
                    }
                    Err(e) => push(e),
                }
            }
            TargetSpec::Table { d, c, energies } => match StateSpace::new(*d, *c) {
                Ok(space) if space.size() > ENUMERATION_LIMIT => {
                    bad.push(format!("{at}: {}^{} states is too many for a table", c, d))
                }
                Ok(space) if energies.len() as u128 != space.size() => bad.push(format!(
                    "{at}: energies has {} entries, expected {}",
                    energies.len(),
                    space.size()
                )),
                Ok(_) if energies.iter().any(|e| !e.is_finite()) => {
                    bad.push(format!("{at}: energies must be finite"))
                }
                Ok(_) => {}
                Err(e) => push(e),
            },
            TargetSpec::Remote { .. } => {}
        }
    }

    /// Builds the in-process energy. Remote targets connect through `rpc`.
    pub fn build(&self, rpc: Option<&RpcSpec>) -> Result<Box<dyn Energy>> {
        Ok(match self {
            TargetSpec::Ising { side, beta } => Box::new(LatticeTarget::ising(*side, *beta)?),
            TargetSpec::Potts { side, q, beta } => Box::new(LatticeTarget::potts(*side, *q, *beta)?),
            TargetSpec::Gray { dims, bits, half_width, energy } => {
                let g = GrayCodeConfig { dims: *dims, bits: *bits, half_width: *half_width };
                Box::new(GrayTarget::new(energy.name(), g, energy.build(*dims)?)?)
            }
            TargetSpec::Table { d, c, energies } => {
                Box::new(FnEnergy::table("table", StateSpace::new(*d, *c)?, energies.clone())?)
            }
            TargetSpec::Remote { name } => {
                let rpc = rpc.ok_or_else(|| config_error("remote target needs an [energy_rpc] block"))?;
                let endpoint = rpc.endpoint()?;
                let remote = RemoteEnergy::connect(name.clone(), &endpoint, rpc.timeout()?)
                    .with_context(|| format!("connecting to energy server at {endpoint}"))?;
                Box::new(remote)
            }
        })
    }

    /// The continuous mixture behind a Gray target, when there is one.
    pub fn mixture(&self) -> Option<(GrayCodeConfig, GaussianMixture)> {
        match self {
            TargetSpec::Gray { dims, bits, half_width, energy } => {
                let g = GrayCodeConfig { dims: *dims, bits: *bits, half_width: *half_width };
                match energy.build(*dims).ok()? {
                    ContinuousEnergy::Mixture(m) => Some((g, m)),
                    _ => None,
                }
            }
            _ => None,
        }
    }
}

impl GrayEnergy {
    fn name(&self) -> &'static str {
        match self {
            GrayEnergy::DoubleWell => "double-well",
            GrayEnergy::ManyWell => "many-well",
            GrayEnergy::RotatedManyWell => "rotated-many-well",
            GrayEnergy::Mixture { .. } => "gmm",
            GrayEnergy::Gmm40 { .. } => "gmm40",
        }
    }

    pub fn build(&self, dims: usize) -> dsb_core::Result<ContinuousEnergy> {
        Ok(match self {
            GrayEnergy::DoubleWell => ContinuousEnergy::DoubleWell,
            GrayEnergy::ManyWell => ContinuousEnergy::ManyWell,
            GrayEnergy::RotatedManyWell => ContinuousEnergy::RotatedManyWell,
            GrayEnergy::Mixture { means } => ContinuousEnergy::Mixture(GaussianMixture::new(means.clone())?),
            GrayEnergy::Gmm40 { seed } => ContinuousEnergy::Mixture(GaussianMixture::gmm40(dims, *seed)?),
        })
    }
}

fn kernel_violations(kernel: &McmcKernel, target: &TargetSpec, bad: &mut Vec<String>, at: &str) {
    match *kernel {
        McmcKernel::SwendsenWang if !target.is_lattice() => {
            bad.push(format!("{at}: Swendsen-Wang needs an ising or potts target"))
        }
        McmcKernel::Mh { h: 0 } => bad.push(format!("{at}: Hamming-ball radius h must be at least 1")),
        McmcKernel::Mh { h } => {
            if let Some((d, _)) = target.static_space() {
                if h > d {
                    bad.push(format!("{at}: Hamming-ball radius {h} exceeds d={d}"));
                }
            }
        }
        McmcKernel::Categorical { p_stay } if !(p_stay > 0.0 && p_stay < 1.0) => {
            bad.push(format!("{at}: p_stay={p_stay} must lie in (0, 1)"))
        }
        _ => {}
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_error(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Reads a config file, or a preset when `name` is not a path.
    pub fn load(name: &str) -> Result<Self> {
        let path = Path::new(name);
        if path.exists() {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return Self::from_toml(&text).with_context(|| format!("in {}", path.display()));
        }
        preset(name).ok_or_else(|| {
            config_error(format!("`{name}` is neither a config file nor a preset (known presets: {})", PRESETS.join(", ")))
        })
    }

    pub fn run_kind(&self) -> Option<RunKind> {
        match (&self.train, &self.bridge, &self.mcmc) {
            (Some(_), None, None) => Some(RunKind::Train),
            (None, Some(_), None) => Some(RunKind::Bridge),
            (None, None, Some(_)) => Some(RunKind::Mcmc),
            _ => None,
        }
    }

    /// Every violated constraint, joined; the error names the offending fields.
    pub fn validate(&self) -> Result<RunKind> {
        let mut bad = Vec::new();
        let kind = self.run_kind();
        if kind.is_none() {
            let present: Vec<&str> = [("train", self.train.is_some()), ("bridge", self.bridge.is_some()), ("mcmc", self.mcmc.is_some())]
                .into_iter()
                .filter_map(|(n, p)| p.then_some(n))
                .collect();
            bad.push(format!(
                "exactly one of [train], [bridge], [mcmc] is required, found {}",
                if present.is_empty() { "none".to_string() } else { present.join(", ") }
            ));
        }
        match &self.target {
            None => bad.push("missing [target] block".into()),
            Some(t) => {
                t.violations(&mut bad, "target");
                if let TargetSpec::Remote { .. } = t {
                    match &self.energy_rpc {
                        None => bad.push("target: remote target needs an [energy_rpc] block".into()),
                        Some(rpc) => {
                            if let Err(e) = rpc.endpoint() {
                                bad.push(e.to_string());
                            }
                        }
                    }
                }
            }
        }
        if let Some(rpc) = &self.energy_rpc {
            if let Some(s) = rpc.timeout_secs {
                if !(s > 0.0 && s.is_finite()) {
                    bad.push(format!("energy_rpc.timeout_secs={s} must be positive"));
                }
            }
        }
        let d = self.target.as_ref().and_then(TargetSpec::static_space).map(|(d, _)| d);
        let needs_net = matches!(kind, Some(RunKind::Train | RunKind::Bridge));
        match &self.net {
            None if needs_net => bad.push("missing [net] block".into()),
            Some(n) if n.hidden.contains(&0) => bad.push("net.hidden widths must be positive".into()),
            _ => {}
        }
        if let Some(train) = &self.train {
            if let Err(e) = train.validate() {
                bad.push(format!("train: {e}"));
            }
            match &self.kernel {
                None => bad.push("missing [kernel] block".into()),
                Some(Process::Masked { schedule }) => {
                    if let Some(d) = d {
                        if let Err(e) = schedule.validate(d) {
                            bad.push(format!("kernel: {e}"));
                        }
                    }
                }
                Some(Process::Uniform { kernel }) => {
                    if let Err(e) = kernel.validate() {
                        bad.push(format!("kernel: {e}"));
                    }
                }
            }
            if let (Some(op), Some(t)) = (&train.off_policy, &self.target) {
                if let Some(ex) = &op.exploration {
                    kernel_violations(&ex.kernel, t, &mut bad, "train.off_policy.exploration.kernel");
                }
            }
        }
        if let Some(bridge) = &self.bridge {
            if let Err(e) = bridge.validate() {
                bad.push(format!("bridge: {e}"));
            }
            if self.kernel.is_some() {
                bad.push("kernel: a bridge takes its reference kernel from [bridge.kernel]; remove [kernel]".into());
            }
            if let (Some(op), Some(t)) = (&bridge.off_policy, &self.target) {
                kernel_violations(&op.mcmc, t, &mut bad, "bridge.off_policy.mcmc");
            }
            match &self.source {
                None => bad.push("missing [source] block".into()),
                Some(SourceSpec::Point { state }) => {
                    if let Some((d, c)) = self.target.as_ref().and_then(TargetSpec::static_space) {
                        if state.len() != d || state.iter().any(|&s| s as usize >= c) {
                            bad.push(format!("source.state must have {d} symbols below {c}"));
                        }
                    }
                }
                Some(SourceSpec::Samples { .. }) => {}
                Some(SourceSpec::Target { target, samples }) => {
                    target.violations(&mut bad, "source.target");
                    if matches!(target, TargetSpec::Remote { .. }) {
                        bad.push("source.target cannot be remote".into());
                    }
                    if samples == &Some(0) {
                        bad.push("source.samples must be at least 1".into());
                    }
                    let (a, b) = (target.static_space(), self.target.as_ref().and_then(TargetSpec::static_space));
                    if let (Some(a), Some(b)) = (a, b) {
                        if a != b {
                            bad.push(format!("source.target has (d, C) = {a:?} but target has {b:?}"));
                        }
                    }
                }
            }
        } else if self.source.is_some() {
            bad.push("source: only a bridge run takes a [source] block".into());
        }
        if let (Some(m), Some(t)) = (&self.mcmc, &self.target) {
            m.violations(t, &mut bad, "mcmc");
        }
        if self.eval.m_eval < 2 {
            bad.push("eval.m_eval must be at least 2".into());
        }
        if self.eval.samples < 2 {
            bad.push("eval.samples must be at least 2".into());
        }
        if let (Some(r), Some(t)) = (&self.eval.reference, &self.target) {
            match r {
                ReferenceSpec::Oracle { samples } => {
                    if *samples == 0 {
                        bad.push("eval.reference.samples must be at least 1".into());
                    }
                    if let Some((d, c)) = t.static_space() {
                        if (c as f64).powi(d as i32) > ENUMERATION_LIMIT as f64 {
                            bad.push(format!("eval.reference: oracle needs an enumerable target, {c}^{d} states is too many"));
                        }
                    }
                }
                ReferenceSpec::Mixture { samples } => {
                    if *samples == 0 {
                        bad.push("eval.reference.samples must be at least 1".into());
                    }
                    if t.mixture().is_none() {
                        bad.push("eval.reference: mixture sampling needs a gray target with a mixture energy".into());
                    }
                }
                ReferenceSpec::Mcmc(m) => m.violations(t, &mut bad, "eval.reference"),
                ReferenceSpec::File { .. } => {}
            }
        }
        if bad.is_empty() {
            Ok(kind.expect("checked above"))
        } else {
            Err(config_error(format!("invalid config:\n  - {}", bad.join("\n  - "))))
        }
    }

    pub fn target(&self) -> &TargetSpec {
        self.target.as_ref().expect("validated config has a target")
    }

    pub fn hidden(&self) -> &[usize] {
        &self.net.as_ref().expect("validated config has a net").hidden
    }
}

/// Names accepted wherever a config path is.
pub const PRESETS: &[&str] = &[
    "ising16-b0.4407",
    "ising16-b0.6",
    "ising16-b1.2",
    "potts16-b1.005",
    "potts16-b1.2",
    "gmm40-d16",
    "gmm40-d32",
    "manywell-d32",
    "manywell-d80",
    "outsourced-d16-c8",
    "mh-ising16-b0.6",
    "mh-potts16-b1.005",
    "mh-gmm40-d16",
    "mh-manywell-d32",
    "3gmm-4gmm-16bit",
];

fn base(name: &str, target: TargetSpec) -> ExperimentConfig {
    ExperimentConfig {
        seed: 0,
        output: PathBuf::from("runs").join(name),
        checkpoint_every: 1000,
        target: Some(target),
        kernel: None,
        net: None,
        train: None,
        bridge: None,
        source: None,
        mcmc: None,
        eval: EvalSpec::default(),
        energy_rpc: None,
    }
}

/// Off-policy TB with buffer and MCMC exploration, as used for the lattice and synthetic targets.
fn off_policy_train(batch: usize, buffer: usize, sample_ratio: f64, interval: u64, steps: usize, kernel: McmcKernel) -> TrainConfig {
    TrainConfig {
        epochs: 20000,
        batch_size: batch,
        loss: LossKind::Tb,
        lr: 1e-3,
        weight_decay: 0.0,
        c_lr: 0.1,
        anneal: false,
        off_policy: Some(OffPolicyConfig {
            ratio: Ratio { num: 2, den: 1 },
            buffer_capacity: buffer,
            exploration: Some(ExplorationConfig { kernel, interval, steps, sample_ratio }),
        }),
        eval_every: 1000,
        m_eval: 2048,
        seed: 0,
    }
}

fn lattice_train(name: &str, target: TargetSpec) -> ExperimentConfig {
    let mut c = base(name, target);
    c.kernel = Some(Process::Masked { schedule: MaskingSchedule::Random { k_min: 4, k_max: 4 } });
    c.net = Some(NetSpec { hidden: vec![256, 256] });
    c.train = Some(off_policy_train(128, 12800, 0.2, 500, 100, McmcKernel::SwendsenWang));
    c.eval.reference = Some(ReferenceSpec::Mcmc(McmcSpec {
        kernel: McmcKernel::SwendsenWang,
        chains: 128,
        burn_in: 1000,
        samples_per_chain: 16,
        thin: 10,
    }));
    c
}

fn gray(dims: usize, half_width: f64, energy: GrayEnergy) -> TargetSpec {
    TargetSpec::Gray { dims, bits: 8, half_width, energy }
}

fn synthetic_train(name: &str, target: TargetSpec, layers: usize, schedule: MaskingSchedule, reference: ReferenceSpec) -> ExperimentConfig {
    let mut c = base(name, target);
    c.kernel = Some(Process::Masked { schedule });
    c.net = Some(NetSpec { hidden: vec![256; layers] });
    c.train = Some(off_policy_train(128, 12800, 0.2, 500, 100, McmcKernel::Mh { h: 5 }));
    c.eval.reference = Some(reference);
    c
}

fn mh_baseline(name: &str, target: TargetSpec, h: usize) -> ExperimentConfig {
    let mut c = base(name, target);
    c.checkpoint_every = 0;
    c.mcmc = Some(McmcSpec::new(McmcKernel::Mh { h }));
    c
}

fn manywell_reference() -> ReferenceSpec {
    ReferenceSpec::Mcmc(McmcSpec { kernel: McmcKernel::Mh { h: 5 }, chains: 128, burn_in: 2000, samples_per_chain: 16, thin: 200 })
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let ising = |beta| TargetSpec::Ising { side: 16, beta };
    let potts = |beta| TargetSpec::Potts { side: 16, q: 3, beta };
    let single = |d: usize| MaskingSchedule::single_step(d);
    Some(match name {
        "ising16-b0.4407" => lattice_train(name, ising(0.4407)),
        "ising16-b0.6" => lattice_train(name, ising(0.6)),
        "ising16-b1.2" => lattice_train(name, ising(1.2)),
        "potts16-b1.005" => lattice_train(name, potts(1.005)),
        "potts16-b1.2" => lattice_train(name, potts(1.2)),
        "gmm40-d16" => synthetic_train(
            name,
            gray(2, 50.0, GrayEnergy::Gmm40 { seed: 0 }),
            2,
            single(16),
            ReferenceSpec::Mixture { samples: 2048 },
        ),
        "gmm40-d32" => synthetic_train(
            name,
            gray(4, 50.0, GrayEnergy::Gmm40 { seed: 0 }),
            4,
            single(32),
            ReferenceSpec::Mixture { samples: 2048 },
        ),
        "manywell-d32" => {
            synthetic_train(name, gray(4, 4.0, GrayEnergy::RotatedManyWell), 2, single(32), manywell_reference())
        }
        "manywell-d80" => synthetic_train(
            name,
            gray(10, 4.0, GrayEnergy::RotatedManyWell),
            4,
            MaskingSchedule::Random { k_min: 4, k_max: 4 },
            manywell_reference(),
        ),
        "outsourced-d16-c8" => {
            let mut c = base(name, TargetSpec::Remote { name: "outsourced-posterior".into() });
            c.kernel = Some(Process::Masked { schedule: single(16) });
            c.net = Some(NetSpec { hidden: vec![256, 256] });
            let mut t = off_policy_train(256, 25600, 0.5, 10, 201, McmcKernel::Mh { h: 1 });
            t.loss = LossKind::Lv;
            t.eval_every = 0;
            c.train = Some(t);
            c.energy_rpc = Some(RpcSpec { command: None, addr: Some("127.0.0.1:7070".into()), timeout_secs: None });
            c
        }
        "mh-ising16-b0.6" => mh_baseline(name, ising(0.6), 1),
        "mh-potts16-b1.005" => mh_baseline(name, potts(1.005), 1),
        "mh-gmm40-d16" => mh_baseline(name, gray(2, 50.0, GrayEnergy::Gmm40 { seed: 0 }), 5),
        "mh-manywell-d32" => mh_baseline(name, gray(4, 4.0, GrayEnergy::RotatedManyWell), 5),
        "3gmm-4gmm-16bit" => {
            let r3 = 3.0;
            let three: Vec<Vec<f64>> = [90.0f64, 210.0, 330.0]
                .iter()
                .map(|deg| vec![r3 * deg.to_radians().cos(), r3 * deg.to_radians().sin()])
                .collect();
            let four = vec![vec![2.5, 2.5], vec![-2.5, 2.5], vec![-2.5, -2.5], vec![2.5, -2.5]];
            let mut c = base(name, gray(2, 5.0, GrayEnergy::Mixture { means: four }));
            c.checkpoint_every = 0;
            c.net = Some(NetSpec { hidden: vec![256, 256] });
            c.source = Some(SourceSpec::Target { target: gray(2, 5.0, GrayEnergy::Mixture { means: three }), samples: Some(4096) });
            c.bridge = Some(BridgeConfig {
                iterations: 10,
                k_traj: 8,
                groups: 16,
                backward_batch: 128,
                forward_steps: 1000,
                backward_steps: 1000,
                tolerance: Some(1e-4),
                lr: 1e-3,
                lr_decay: false,
                kernel: UniformKernel { p_flip: 0.1, steps: 20 },
                off_policy: Some(BridgeOffPolicy {
                    buffer_capacity: 12800,
                    mcmc: McmcKernel::Mh { h: 5 },
                    mcmc_steps: 100,
                    refresh: 512,
                }),
                seed: 0,
            });
            c.eval.reference = Some(ReferenceSpec::Mixture { samples: 2048 });
            c
        }
        _ => return None,
    })
}
