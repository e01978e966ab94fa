//! The subcommands: each builds its inputs from a validated config and
//! fills a run directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use dsb_core::bridge::{self, BridgePair, ExactTables, IterationLog, Marginal};
use dsb_core::diffusion::{exact_terminal_distribution, DiffusionSampler, Process, Trajectory};
use dsb_core::energy_rpc::{self, ServeOptions, Session};
use dsb_core::mcmc::run_chains;
use dsb_core::metrics::{
    self, correlation_error, magnetisation_error, mmd, sinkhorn_hamming, sinkhorn_l2, tv, tv_to_oracle, Estimate,
    LatticeModel, MmdResult, SinkhornConfig, SinkhornResult,
};
use dsb_core::objectives::LossKind;
use dsb_core::rng::{self, tag};
use dsb_core::targets::{Energy, EnumerationOracle, StateSpace, ENUMERATION_LIMIT};
use dsb_core::training::{evaluate, evaluation_sampler, EpochLog, RunState, Trainer};

use crate::config::{config_error, ExperimentConfig, ReferenceSpec, RpcSpec, RunKind, SourceSpec, TargetSpec};
use crate::plot;
use crate::run::{self, Manifest, Override, RunDir, CHECKPOINT, REPORT, SAMPLES};

/// Largest space enumerated through a remote energy server.
const REMOTE_ENUMERATION_LIMIT: u128 = 1 << 16;

/// Largest `(C+1)^d` for which the exact terminal law of a masked sampler is computed.
const EXACT_MASKED_LIMIT: u128 = 1 << 15;

/// Offset between the run seed and the seed of reference MCMC chains, so the
/// reference never shares streams with an MCMC baseline run on the same seed.
const REFERENCE_SEED_OFFSET: u64 = 0x5eed;

/// Everything measured about a set of model samples. Absent metrics do not
/// apply to the target (or lack a reference), and are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub target: String,
    pub d: usize,
    pub c: usize,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elbo: Option<Estimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eubo: Option<Estimate>,
    /// `-c` of a trajectory-balance run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_z_learned: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_exact: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_empirical: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_forward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_backward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnetisation_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sinkhorn: Option<SinkhornResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd: Option<MmdResult>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Command-line replacements for config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<u64>,
    pub iterations: Option<usize>,
    pub on_policy: bool,
    pub energy_cmd: Option<String>,
    pub energy_addr: Option<String>,
}

fn record<T: Serialize>(log: &mut Vec<Override>, field: &str, file: &T, value: &T) -> Result<()> {
    log.push(Override { field: field.into(), file: serde_json::to_value(file)?, value: serde_json::to_value(value)? });
    Ok(())
}

impl Overrides {
    /// Applies the overrides to `cfg` and returns what changed.
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<Vec<Override>> {
        let mut log = Vec::new();
        if let Some(out) = &self.out {
            record(&mut log, "output", &cfg.output, out)?;
            cfg.output = out.clone();
        }
        if let Some(seed) = self.seed {
            record(&mut log, "seed", &cfg.seed, &seed)?;
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            let train = cfg.train.as_mut().ok_or_else(|| config_error("--epochs needs a [train] block"))?;
            record(&mut log, "train.epochs", &train.epochs, &epochs)?;
            train.epochs = epochs;
        }
        if let Some(iterations) = self.iterations {
            let bridge = cfg.bridge.as_mut().ok_or_else(|| config_error("--iterations needs a [bridge] block"))?;
            record(&mut log, "bridge.iterations", &bridge.iterations, &iterations)?;
            bridge.iterations = iterations;
        }
        if self.on_policy {
            let bridge = cfg.bridge.as_mut().ok_or_else(|| config_error("--on-policy needs a [bridge] block"))?;
            record(&mut log, "bridge.off_policy", &bridge.off_policy, &None)?;
            bridge.off_policy = None;
        }
        let endpoint = match (&self.energy_cmd, &self.energy_addr) {
            (Some(_), Some(_)) => return Err(config_error("give either --energy-cmd or --energy-addr, not both")),
            (Some(cmd), None) => Some(RpcSpec { command: Some(split_command(cmd)?), addr: None, timeout_secs: None }),
            (None, Some(addr)) => Some(RpcSpec { command: None, addr: Some(addr.clone()), timeout_secs: None }),
            (None, None) => None,
        };
        if let Some(mut spec) = endpoint {
            let file = cfg.energy_rpc.clone();
            spec.timeout_secs = file.as_ref().and_then(|f| f.timeout_secs);
            record(&mut log, "energy_rpc", &file, &Some(spec.clone()))?;
            cfg.energy_rpc = Some(spec);
        }
        Ok(log)
    }
}

/// Splits a command line on whitespace; arguments containing spaces belong in the config file.
pub fn split_command(cmd: &str) -> Result<Vec<String>> {
    let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
    if argv.is_empty() {
        return Err(config_error("empty energy server command"));
    }
    Ok(argv)
}

fn expect_kind(cfg: &ExperimentConfig, want: RunKind) -> Result<()> {
    let kind = cfg.validate()?;
    if kind != want {
        return Err(config_error(format!("`dsb {want}` needs a [{want}] block, this config describes a {kind} run")));
    }
    Ok(())
}

fn all_states(space: StateSpace) -> Vec<Vec<u8>> {
    let n = space.size() as usize;
    (0..n)
        .map(|mut i| {
            let mut x = vec![0u8; space.d];
            for pos in (0..space.d).rev() {
                x[pos] = (i % space.c) as u8;
                i /= space.c;
            }
            x
        })
        .collect()
}

/// The enumeration oracle when the target is small enough; remote targets
/// are enumerated in batched requests under a tighter limit.
fn oracle(spec: &TargetSpec, target: &dyn Energy) -> Result<Option<EnumerationOracle>> {
    let limit = match spec {
        TargetSpec::Remote { .. } => REMOTE_ENUMERATION_LIMIT,
        _ => ENUMERATION_LIMIT,
    };
    let space = target.space();
    if space.size() > limit {
        return Ok(None);
    }
    let energies = target.energies(&all_states(space))?;
    Ok(Some(EnumerationOracle::from_energies(space, energies)?))
}

fn check_space(samples: &[Vec<u8>], space: StateSpace, what: &str) -> Result<()> {
    for (i, x) in samples.iter().enumerate() {
        space.check(x).map_err(|e| config_error(format!("{what}, state {}: {e}", i + 1)))?;
    }
    Ok(())
}

/// Samples from the target used by EUBO and the sample-based metrics.
pub fn reference_samples(
    cfg: &ExperimentConfig,
    target: &dyn Energy,
    oracle: Option<&EnumerationOracle>,
) -> Result<Option<Vec<Vec<u8>>>> {
    let Some(spec) = &cfg.eval.reference else { return Ok(None) };
    let mut rng = rng::stream(cfg.seed, &[tag::TRUE_SAMPLES]);
    let samples = match spec {
        ReferenceSpec::Oracle { samples } => {
            let o = oracle.ok_or_else(|| config_error("eval.reference: the target is too large to enumerate"))?;
            (0..*samples).map(|_| o.sample(&mut rng)).collect()
        }
        ReferenceSpec::Mixture { samples } => {
            let (g, mix) = cfg.target().mixture().ok_or_else(|| config_error("eval.reference: target is not a Gray-coded mixture"))?;
            (0..*samples)
                .map(|_| {
                    let mean = &mix.means[rng.gen_range(0..mix.means.len())];
                    let v: Vec<f64> = mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
                    g.encode(&v)
                })
                .collect::<dsb_core::Result<_>>()?
        }
        ReferenceSpec::Mcmc(m) => {
            run_chains(&m.kernel, target, &m.chain(), cfg.seed.wrapping_add(REFERENCE_SEED_OFFSET))?
        }
        ReferenceSpec::File { path } => {
            let s = run::read_states(path)?;
            check_space(&s, target.space(), &path.display().to_string())?;
            s
        }
    };
    Ok(Some(samples))
}

fn lattice_model(target: &dyn Energy) -> Option<(usize, LatticeModel)> {
    target.lattice().map(|p| (p.side, if p.q == 2 { LatticeModel::Ising } else { LatticeModel::Potts { q: p.q } }))
}

fn decode_all(target: &dyn Energy, states: &[Vec<u8>]) -> Option<Vec<Vec<f64>>> {
    states.iter().map(|x| target.decode(x)).collect()
}

/// Sample-based metrics shared by every command.
fn sample_report(
    target: &dyn Energy,
    samples: &[Vec<u8>],
    reference: Option<&[Vec<u8>]>,
    oracle: Option<&EnumerationOracle>,
) -> Result<Report> {
    let space = target.space();
    let mut r = Report {
        target: target.name().to_string(),
        d: space.d,
        c: space.c,
        samples: samples.len(),
        reference_samples: reference.map(<[_]>::len),
        elbo: None,
        eubo: None,
        log_z_learned: None,
        log_z: oracle.map(EnumerationOracle::log_z),
        tv_exact: None,
        tv_empirical: oracle.map(|o| tv_to_oracle(samples, o)),
        tv_forward: None,
        tv_backward: None,
        magnetisation_error: None,
        correlation_error: None,
        sinkhorn: None,
        mmd: None,
    };
    if let Some(reference) = reference {
        if let Some((side, model)) = lattice_model(target) {
            r.magnetisation_error = Some(magnetisation_error(samples, reference, side, model)?);
            r.correlation_error = Some(correlation_error(samples, reference, side, model)?);
        }
        let sk = SinkhornConfig::default();
        match (decode_all(target, samples), decode_all(target, reference)) {
            (Some(a), Some(b)) => {
                r.sinkhorn = Some(sinkhorn_l2(&a, &b, &sk)?);
                r.mmd = Some(mmd(&a, &b)?);
            }
            _ => r.sinkhorn = Some(sinkhorn_hamming(samples, reference, &sk)?),
        }
    }
    Ok(r)
}

fn exact_tv(eval: &DiffusionSampler, oracle: Option<&EnumerationOracle>) -> Result<Option<f64>> {
    let Some(o) = oracle else { return Ok(None) };
    let space = eval.space();
    let feasible = match eval.process() {
        Process::Masked { .. } => (space.c as u128 + 1).checked_pow(space.d as u32).is_some_and(|n| n <= EXACT_MASKED_LIMIT),
        Process::Uniform { .. } => space.size() <= bridge::DIAGNOSTIC_LIMIT,
    };
    if !feasible {
        return Ok(None);
    }
    Ok(Some(tv(&exact_terminal_distribution(eval)?, o.probs())))
}

/// Report and terminal samples of a trained sampler; deterministic given the config.
pub fn sampler_report(
    cfg: &ExperimentConfig,
    target: &dyn Energy,
    sampler: &DiffusionSampler,
    c: f64,
) -> Result<(Report, Vec<Vec<u8>>)> {
    let oracle = oracle(cfg.target(), target)?;
    let reference = reference_samples(cfg, target, oracle.as_ref())?;
    let eval = evaluation_sampler(sampler)?;
    let samples: Vec<Vec<u8>> = metrics::forward_batch(&eval, cfg.eval.samples, cfg.seed, &[tag::EVAL, 2])?
        .into_iter()
        .map(|t| t.terminal().to_vec())
        .collect();
    let mut r = sample_report(target, &samples, reference.as_deref(), oracle.as_ref())?;
    let (elbo, eubo) = evaluate(sampler, target, reference.as_deref(), cfg.eval.m_eval, cfg.seed)?;
    r.elbo = Some(elbo);
    r.eubo = eubo;
    if cfg.train.as_ref().is_some_and(|t| t.loss == LossKind::Tb) {
        r.log_z_learned = Some(-c);
    }
    r.tv_exact = exact_tv(&eval, oracle.as_ref())?;
    Ok((r, samples))
}

fn gray_half_width(cfg: &ExperimentConfig) -> Option<f64> {
    match cfg.target() {
        TargetSpec::Gray { half_width, .. } => Some(*half_width),
        _ => None,
    }
}

/// Sample grid for lattices; decoded CSV and density image for Gray targets.
fn emit_plots(cfg: &ExperimentConfig, run: &RunDir, target: &dyn Energy, samples: &[Vec<u8>]) -> Result<()> {
    if let Some(p) = target.lattice() {
        plot::lattice_grid(samples, p.side, p.q).write(&run.path("samples.ppm"))?;
    }
    if let (Some(points), Some(hw)) = (decode_all(target, samples), gray_half_width(cfg)) {
        run::write_points(&run.path("decoded.csv"), &points)?;
        plot::density(&points, hw).write(&run.path("density.ppm"))?;
    }
    Ok(())
}

fn write_report(run: &RunDir, report: &Report) -> Result<()> {
    fs::write(run.path(REPORT), report.to_json()?)?;
    Ok(())
}

pub fn train(mut cfg: ExperimentConfig, overrides: &Overrides) -> Result<PathBuf> {
    let changed = overrides.apply(&mut cfg)?;
    expect_kind(&cfg, RunKind::Train)?;
    let target = cfg.target().build(cfg.energy_rpc.as_ref())?;
    let space = target.space();
    let process = cfg.kernel.clone().expect("validated");
    if let Process::Masked { schedule } = &process {
        schedule.validate(space.d).map_err(|e| config_error(format!("kernel: {e}")))?;
    }
    let sampler = DiffusionSampler::new(space, process, cfg.hidden(), &mut rng::stream(cfg.seed, &[tag::INIT]))?;
    let mut tc = cfg.train.clone().expect("validated");
    tc.seed = cfg.seed;
    let off_policy = tc.off_policy.is_some();
    let oracle = oracle(cfg.target(), target.as_ref())?;
    let reference = reference_samples(&cfg, target.as_ref(), oracle.as_ref())?;

    let run = RunDir::create(&cfg.output, &cfg)?;
    let mut trainer = Trainer::new(tc, target.as_ref(), sampler)?;
    if let Some(r) = &reference {
        trainer = trainer.with_true_samples(r.clone());
    }
    let mut csv = BufWriter::new(File::create(run.path("metrics.csv"))?);
    writeln!(csv, "{}", EpochLog::CSV_HEADER)?;
    let checkpoint = run.path(CHECKPOINT);
    let every = cfg.checkpoint_every;
    trainer
        .run(|state| {
            let log = state.history.last().expect("an epoch was logged");
            writeln!(csv, "{}", log.csv_row())?;
            if every > 0 && state.epoch % every == 0 {
                csv.flush()?;
                state.save(&checkpoint)?;
            }
            Ok(())
        })
        .context("training aborted")?;
    csv.flush()?;
    drop(csv);
    let state = trainer.into_state();
    state.save(&checkpoint)?;

    let (report, samples) = sampler_report(&cfg, target.as_ref(), &state.sampler, state.c)?;
    run::write_states(&run.path(SAMPLES), &samples)?;
    write_report(&run, &report)?;
    emit_plots(&cfg, &run, target.as_ref(), &samples)?;
    let root = run.root().to_path_buf();
    run.finish("train", &cfg, changed, off_policy)?;
    Ok(root)
}

/// The data endpoint of a bridge.
fn source_marginal(cfg: &ExperimentConfig, space: StateSpace) -> Result<Marginal> {
    let m = match cfg.source.as_ref().expect("validated") {
        SourceSpec::Point { state } => Marginal::Point(state.clone()),
        SourceSpec::Samples { path } => {
            let s = run::read_states(path)?;
            check_space(&s, space, &path.display().to_string())?;
            Marginal::Empirical(s)
        }
        SourceSpec::Target { target, samples } => {
            let energy = target.build(None)?;
            let o = EnumerationOracle::new(energy.as_ref()).context("source target must be enumerable")?;
            match samples {
                None => Marginal::Oracle(o),
                Some(n) => {
                    let mut rng = rng::stream(cfg.seed, &[tag::TRUE_SAMPLES, 1]);
                    Marginal::Empirical((0..*n).map(|_| o.sample(&mut rng)).collect())
                }
            }
        }
    };
    m.check(space).map_err(|e| config_error(format!("source: {e}")))?;
    Ok(m)
}

/// Forward paths of the bridge from `p0`; deterministic given the seed.
fn bridge_paths(cfg: &ExperimentConfig, pair: &BridgePair, p0: &Marginal) -> Result<Vec<Trajectory>> {
    let mut rng = rng::stream(cfg.seed, &[tag::EVAL, 3]);
    (0..cfg.eval.samples)
        .map(|_| {
            let x0 = p0.sample(&mut rng);
            Ok(pair.rollout_forward_from(&x0, &mut rng)?)
        })
        .collect()
}

pub fn bridge_report(cfg: &ExperimentConfig, target: &dyn Energy, pair: &BridgePair, p0: &Marginal) -> Result<(Report, Vec<Trajectory>)> {
    let oracle = oracle(cfg.target(), target)?;
    let reference = reference_samples(cfg, target, oracle.as_ref())?;
    let paths = bridge_paths(cfg, pair, p0)?;
    let terminals: Vec<Vec<u8>> = paths.iter().map(|t| t.terminal().to_vec()).collect();
    let mut r = sample_report(target, &terminals, reference.as_deref(), oracle.as_ref())?;
    if let Some(tables) = ExactTables::new(p0, target)? {
        let (f, b) = tables.tvs(pair)?;
        r.tv_forward = Some(f);
        r.tv_backward = Some(b);
    }
    Ok((r, paths))
}

pub fn bridge(mut cfg: ExperimentConfig, overrides: &Overrides) -> Result<PathBuf> {
    let changed = overrides.apply(&mut cfg)?;
    expect_kind(&cfg, RunKind::Bridge)?;
    let target = cfg.target().build(cfg.energy_rpc.as_ref())?;
    let space = target.space();
    let p0 = source_marginal(&cfg, space)?;
    let mut bc = cfg.bridge.clone().expect("validated");
    bc.seed = cfg.seed;
    let mut pair = BridgePair::new(space, bc.kernel, cfg.hidden(), &mut rng::stream(cfg.seed, &[tag::INIT]))?;

    let run = RunDir::create(&cfg.output, &cfg)?;
    let mut csv = BufWriter::new(File::create(run.path("bridge.csv"))?);
    writeln!(csv, "{}", IterationLog::CSV_HEADER)?;
    // iteration 0 describes the reference process
    let exact = ExactTables::new(&p0, target.as_ref())?;
    let (tv_forward, tv_backward) = match &exact {
        Some(t) => {
            let (f, b) = t.tvs(&pair)?;
            (Some(f), Some(b))
        }
        None => (None, None),
    };
    let initial = IterationLog {
        iteration: 0,
        backward_steps: 0,
        backward_loss: None,
        forward_steps: 0,
        forward_loss: None,
        tv_forward,
        tv_backward,
    };
    writeln!(csv, "{}", initial.csv_row())?;
    bridge::ipf_run(&bc, &mut pair, &p0, target.as_ref(), |_, log| {
        writeln!(csv, "{}", log.csv_row())?;
        csv.flush()?;
        Ok(())
    })
    .context("bridge aborted")?;
    csv.flush()?;
    drop(csv);
    pair.save(&run.path(CHECKPOINT))?;

    let (report, paths) = bridge_report(&cfg, target.as_ref(), &pair, &p0)?;
    let terminals: Vec<Vec<u8>> = paths.iter().map(|t| t.terminal().to_vec()).collect();
    run::write_states(&run.path(SAMPLES), &terminals)?;
    write_report(&run, &report)?;
    emit_plots(&cfg, &run, target.as_ref(), &terminals)?;
    if let Some(hw) = gray_half_width(&cfg) {
        let dir = run.path("marginals");
        fs::create_dir_all(&dir)?;
        for n in 0..=bc.kernel.steps {
            let states: Vec<Vec<u8>> = paths.iter().map(|t| t.states[n].clone()).collect();
            if let Some(points) = decode_all(target.as_ref(), &states) {
                plot::density(&points, hw).write(&dir.join(format!("step_{n:03}.ppm")))?;
            }
        }
    }
    let root = run.root().to_path_buf();
    run.finish("bridge", &cfg, changed, bc.off_policy.is_some())?;
    Ok(root)
}

pub fn mcmc(mut cfg: ExperimentConfig, overrides: &Overrides) -> Result<PathBuf> {
    let changed = overrides.apply(&mut cfg)?;
    expect_kind(&cfg, RunKind::Mcmc)?;
    let target = cfg.target().build(cfg.energy_rpc.as_ref())?;
    let spec = cfg.mcmc.expect("validated");
    spec.kernel.validate(target.as_ref())?;
    let samples = run_chains(&spec.kernel, target.as_ref(), &spec.chain(), cfg.seed)?;
    let oracle = oracle(cfg.target(), target.as_ref())?;
    let reference = reference_samples(&cfg, target.as_ref(), oracle.as_ref())?;
    let report = sample_report(target.as_ref(), &samples, reference.as_deref(), oracle.as_ref())?;

    let run = RunDir::create(&cfg.output, &cfg)?;
    run::write_states(&run.path(SAMPLES), &samples)?;
    write_report(&run, &report)?;
    emit_plots(&cfg, &run, target.as_ref(), &samples)?;
    let root = run.root().to_path_buf();
    run.finish("mcmc", &cfg, changed, false)?;
    Ok(root)
}

fn shape_error(what: &str, got: StateSpace, want: StateSpace) -> anyhow::Error {
    config_error(format!(
        "{what} has shape d={}, C={} but the config's target has d={}, C={}",
        got.d, got.c, want.d, want.c
    ))
}

/// The resolved config of a finished run: the manifest's copy, or the snapshot
/// when the run never closed.
pub fn run_config(dir: &Path) -> Result<ExperimentConfig> {
    if dir.join(run::MANIFEST).exists() {
        return Ok(Manifest::read(dir)?.config);
    }
    let path = dir.join(run::CONFIG);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_toml(&text)
}

/// Recomputes the report of a run from its checkpoint.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Report> {
    let kind = cfg.validate()?;
    let target = cfg.target().build(cfg.energy_rpc.as_ref())?;
    let space = target.space();
    match kind {
        RunKind::Train => {
            let tc = cfg.train.clone().expect("validated");
            let state = RunState::load(checkpoint, &tc)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            if state.sampler.space() != space {
                return Err(shape_error("checkpoint", state.sampler.space(), space));
            }
            if let (Some(Process::Masked { .. }), Process::Uniform { .. }) | (Some(Process::Uniform { .. }), Process::Masked { .. }) =
                (&cfg.kernel, state.sampler.process())
            {
                return Err(config_error("checkpoint and config use different diffusion processes"));
            }
            Ok(sampler_report(cfg, target.as_ref(), &state.sampler, state.c)?.0)
        }
        RunKind::Bridge => {
            let bc = cfg.bridge.as_ref().expect("validated");
            let pair = BridgePair::load(checkpoint, space, bc.kernel).map_err(|e| match e {
                dsb_core::Error::Config(m) => config_error(format!(
                    "checkpoint does not fit the config's target (d={}, C={}): {m}",
                    space.d, space.c
                )),
                e => e.into(),
            })?;
            let p0 = source_marginal(cfg, space)?;
            Ok(bridge_report(cfg, target.as_ref(), &pair, &p0)?.0)
        }
        RunKind::Mcmc => {
            let samples = run::read_states(&checkpoint.join(SAMPLES)).or_else(|_| run::read_states(checkpoint))?;
            if let Some(x) = samples.first() {
                if x.len() != space.d {
                    return Err(shape_error("sample file", StateSpace { d: x.len(), ..space }, space));
                }
            }
            check_space(&samples, space, "samples")?;
            let oracle = oracle(cfg.target(), target.as_ref())?;
            let reference = reference_samples(cfg, target.as_ref(), oracle.as_ref())?;
            sample_report(target.as_ref(), &samples, reference.as_deref(), oracle.as_ref())
        }
    }
}

/// Compares an energy server against the matching in-process energy over
/// random states; returns the number of states and the largest difference.
pub fn fixture_check(
    rpc: &RpcSpec,
    expected: Option<&dyn Energy>,
    states: usize,
    tolerance: f64,
    seed: u64,
) -> Result<(usize, f64)> {
    let endpoint = rpc.endpoint()?;
    let mut session = Session::connect(&endpoint, rpc.timeout()?).with_context(|| format!("connecting to {endpoint}"))?;
    let space = session.space();
    let fallback;
    let local: &dyn Energy = match expected {
        Some(e) => {
            if e.space() != space {
                return Err(shape_error("energy server", space, e.space()));
            }
            e
        }
        None => {
            fallback = energy_rpc::sum_symbols(space);
            &fallback
        }
    };
    let mut rng = rng::stream(seed, &[tag::EVAL, 4]);
    let xs: Vec<Vec<u8>> = (0..states).map(|_| (0..space.d).map(|_| rng.gen_range(0..space.c) as u8).collect()).collect();
    let remote = session.query_energies(&xs)?;
    let want = local.energies(&xs)?;
    let worst = remote.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if !(worst <= tolerance) {
        bail!("energy server disagrees with {}: max |ΔE| = {worst:e} over {states} states (tolerance {tolerance:e})", local.name());
    }
    Ok((states, worst))
}

/// Serves `energy` on stdio, or on TCP when `listen` is given.
pub fn fixture_server(energy: &dyn Energy, listen: Option<&str>, version: u64) -> Result<()> {
    let opts = ServeOptions { version };
    match listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            energy_rpc::serve_tcp(listener, energy, opts)?;
        }
        None => {
            let stdin = std::io::stdin();
            energy_rpc::serve(stdin.lock(), std::io::stdout().lock(), energy, opts)?;
        }
    }
    Ok(())
}
