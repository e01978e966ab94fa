use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::policy::{self, check_net, log_prob_rows, log_prob_rows_on_tape};
use crate::diffusion::{MaskingSchedule, UniformKernel, MASK};
use crate::error::{Error, Result};
use crate::nn::{PolicyNet, Tape, Var};
use crate::targets::StateSpace;

/// `log C(n, k)`.
pub fn ln_choose(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

/// The fixed noising process paired with the learned forward kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "process", rename_all = "snake_case")]
pub enum Process {
    /// Start fully masked; the backward kernel masks `k_n` random positions per step.
    Masked { schedule: MaskingSchedule },
    /// Start uniform over the space; the backward kernel is [`UniformKernel`].
    Uniform { kernel: UniformKernel },
}

/// A path `X_0..X_N` with per-step log-probabilities in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<u8>>,
    /// Realised unmask counts (masked process only).
    pub counts: Vec<usize>,
    pub log_p0: f64,
    pub forward_log_probs: Vec<f64>,
    pub backward_log_probs: Vec<f64>,
    pub terminal_energy: Option<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn terminal(&self) -> &[u8] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn initial(&self) -> &[u8] {
        &self.states[0]
    }

    /// `log p_0(X_0) + Σ log p→(X_{n+1} | X_n)`.
    pub fn forward_log_prob(&self) -> f64 {
        self.log_p0 + self.forward_log_probs.iter().sum::<f64>()
    }

    /// `Σ log p←(X_n | X_{n+1})`.
    pub fn backward_log_prob(&self) -> f64 {
        self.backward_log_probs.iter().sum()
    }

    /// Debug dump: one line per step with the state, the positions that
    /// changed, and both log-probabilities.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        let render = |x: &[u8]| -> String {
            x.iter()
                .map(|&s| if s == MASK { "*".to_string() } else { (s as usize + 1).to_string() })
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(w, "step=0 state={} log_p0={}", render(&self.states[0]), self.log_p0)?;
        for n in 0..self.steps() {
            let (a, b) = (&self.states[n], &self.states[n + 1]);
            let changed: Vec<String> =
                (0..a.len()).filter(|&i| a[i] != b[i]).map(|i| i.to_string()).collect();
            writeln!(
                w,
                "step={} state={} changed={} fwd={} bwd={}",
                n + 1,
                render(b),
                changed.join(","),
                self.forward_log_probs[n],
                self.backward_log_probs[n]
            )?;
        }
        Ok(())
    }
}

fn sample_row<R: Rng + ?Sized>(log_row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (v, lp) in log_row.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return v;
        }
    }
    // rounding left a sliver above the final cumulative value
    log_row.iter().rposition(|lp| lp.is_finite()).unwrap_or(log_row.len() - 1)
}

/// A learned forward kernel paired with a fixed noising process.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSampler {
    net: PolicyNet,
    space: StateSpace,
    process: Process,
}

impl DiffusionSampler {
    /// Network sized for `space` with the given hidden widths, Glorot-initialised.
    pub fn new<R: Rng + ?Sized>(
        space: StateSpace,
        process: Process,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let space = Self::net_space(space, &process);
        let mut net = PolicyNet::init(&policy::layer_dims(space, hidden), rng)?;
        // start from uniform rows (masked) or exactly the reference kernel (uniform)
        let last = net.num_layers() - 1;
        let (w, b) = net.layer_ranges(last);
        net.params_mut()[w.start..b.end].fill(0.0);
        Self::from_net(space, process, net)
    }

    pub fn from_net(space: StateSpace, process: Process, net: PolicyNet) -> Result<Self> {
        let space = Self::net_space(space, &process);
        match &process {
            Process::Masked { schedule } => schedule.validate(space.d)?,
            Process::Uniform { kernel } => kernel.validate()?,
        }
        check_net(&net, space)?;
        Ok(Self { net, space, process })
    }

    fn net_space(space: StateSpace, process: &Process) -> StateSpace {
        StateSpace { has_mask: matches!(process, Process::Masked { .. }), ..space }
    }

    pub fn net(&self) -> &PolicyNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut PolicyNet {
        &mut self.net
    }

    /// Terminal state space (no mask symbol).
    pub fn space(&self) -> StateSpace {
        StateSpace { has_mask: false, ..self.space }
    }

    pub fn process(&self) -> &Process {
        &self.process
    }

    /// The same network queried with one unmasked position per step.
    pub fn retimed_single_step(&self) -> Result<Self> {
        self.with_schedule(MaskingSchedule::single_step(self.space.d))
    }

    pub fn with_schedule(&self, schedule: MaskingSchedule) -> Result<Self> {
        match self.process {
            Process::Masked { .. } => {
                schedule.validate(self.space.d)?;
                Ok(Self { process: Process::Masked { schedule }, ..self.clone() })
            }
            Process::Uniform { .. } => {
                Err(Error::config("retiming applies to masked diffusion only"))
            }
        }
    }

    fn masked_time(&self, x: &[u8]) -> f64 {
        x.iter().filter(|&&s| s != MASK).count() as f64 / self.space.d as f64
    }

    fn uniform_time(n: usize, steps: usize) -> f64 {
        n as f64 / steps as f64
    }

    /// Log-probability rows of the forward kernel at `x` (step `n` of the uniform process).
    pub fn forward_rows(&self, x: &[u8], n: usize) -> Result<Vec<f64>> {
        match &self.process {
            Process::Masked { .. } => log_prob_rows(&self.net, self.space, x, self.masked_time(x), None),
            Process::Uniform { kernel } => log_prob_rows(
                &self.net,
                self.space,
                x,
                Self::uniform_time(n, kernel.steps),
                Some(kernel),
            ),
        }
    }

    /// Unmasks a uniform `k`-subset of the masked positions of `x`.
    pub fn masked_forward_step<R: Rng + ?Sized>(
        &self,
        x: &[u8],
        k: usize,
        rng: &mut R,
    ) -> Result<(Vec<u8>, f64)> {
        let mut masked: Vec<usize> = (0..x.len()).filter(|&i| x[i] == MASK).collect();
        if masked.len() < k {
            return Err(Error::Schedule(format!(
                "cannot unmask {k} positions, only {} masked",
                masked.len()
            )));
        }
        let rows = self.forward_rows(x, 0)?;
        let mut lp = -ln_choose(masked.len(), k);
        let (chosen, _) = masked.partial_shuffle(rng, k);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        let mut out = x.to_vec();
        let c = self.space.c;
        for i in chosen {
            let row = &rows[i * c..(i + 1) * c];
            let v = sample_row(row, rng);
            out[i] = v as u8;
            lp += row[v];
        }
        Ok((out, lp))
    }

    /// Masks a uniform `k`-subset of the unmasked positions of `x`.
    pub fn masked_backward_step<R: Rng + ?Sized>(
        x: &[u8],
        k: usize,
        rng: &mut R,
    ) -> Result<(Vec<u8>, f64)> {
        let mut unmasked: Vec<usize> = (0..x.len()).filter(|&i| x[i] != MASK).collect();
        if unmasked.len() < k {
            return Err(Error::Schedule(format!(
                "cannot mask {k} positions, only {} unmasked",
                unmasked.len()
            )));
        }
        let lp = -ln_choose(unmasked.len(), k);
        let (chosen, _) = unmasked.partial_shuffle(rng, k);
        let mut out = x.to_vec();
        for &i in chosen.iter() {
            out[i] = MASK;
        }
        Ok((out, lp))
    }

    /// Samples every position from the forward rows at step `n`.
    pub fn uniform_forward_step<R: Rng + ?Sized>(
        &self,
        x: &[u8],
        n: usize,
        rng: &mut R,
    ) -> Result<(Vec<u8>, f64)> {
        let rows = self.forward_rows(x, n)?;
        let c = self.space.c;
        let mut out = Vec::with_capacity(x.len());
        let mut lp = 0.0;
        for row in rows.chunks(c) {
            let v = sample_row(row, rng);
            out.push(v as u8);
            lp += row[v];
        }
        Ok((out, lp))
    }

    /// `log p→(b | a)` for a masked transition, validating reachability.
    fn masked_transition(&self, a: &[u8], b: &[u8], k: usize) -> Result<(Vec<usize>, f64)> {
        let mut revealed = Vec::with_capacity(k);
        let mut masked = 0;
        for i in 0..a.len() {
            if a[i] == MASK {
                masked += 1;
                if b[i] != MASK {
                    revealed.push(i);
                }
            } else if a[i] != b[i] {
                return Err(Error::domain(format!("position {i} changed after being unmasked")));
            }
        }
        if revealed.len() != k {
            return Err(Error::domain(format!(
                "transition unmasks {} positions, schedule says {k}",
                revealed.len()
            )));
        }
        Ok((revealed, -ln_choose(masked, k)))
    }

    fn check_shape(&self, traj: &Trajectory) -> Result<()> {
        let steps = traj.steps();
        if let Process::Masked { .. } = self.process {
            if traj.counts.len() != steps {
                return Err(Error::domain("trajectory schedule length differs from step count"));
            }
        }
        if let Process::Uniform { kernel } = self.process {
            if steps != kernel.steps {
                return Err(Error::domain(format!(
                    "trajectory has {steps} steps, kernel uses {}",
                    kernel.steps
                )));
            }
        }
        Ok(())
    }

    fn log_p0(&self, x0: &[u8]) -> f64 {
        match self.process {
            Process::Masked { .. } => {
                if x0.iter().all(|&s| s == MASK) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Process::Uniform { .. } => -(self.space.d as f64) * (self.space.c as f64).ln(),
        }
    }

    /// Per-step forward log-probabilities re-evaluated from the states.
    pub fn forward_step_log_probs(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        self.check_shape(traj)?;
        let c = self.space.c;
        (0..traj.steps())
            .map(|n| {
                let (a, b) = (&traj.states[n], &traj.states[n + 1]);
                let rows = self.forward_rows(a, n)?;
                match self.process {
                    Process::Masked { .. } => {
                        let (revealed, base) = self.masked_transition(a, b, traj.counts[n])?;
                        Ok(base + revealed.iter().map(|&i| rows[i * c + b[i] as usize]).sum::<f64>())
                    }
                    Process::Uniform { .. } => {
                        Ok(b.iter().enumerate().map(|(i, &v)| rows[i * c + v as usize]).sum())
                    }
                }
            })
            .collect()
    }

    /// `log p_0(X_0) + Σ log p→` recomputed from scratch.
    pub fn forward_log_prob(&self, traj: &Trajectory) -> Result<f64> {
        Ok(self.log_p0(traj.initial()) + self.forward_step_log_probs(traj)?.iter().sum::<f64>())
    }

    /// `log p_0(X_0) + Σ log p→` recorded on `tape` (built over this sampler's parameters).
    pub fn forward_log_prob_on_tape(&self, tape: &mut Tape<'_>, traj: &Trajectory) -> Result<Var> {
        self.check_shape(traj)?;
        let c = self.space.c;
        let mut terms = Vec::with_capacity(traj.steps());
        let mut constant = self.log_p0(traj.initial());
        for n in 0..traj.steps() {
            let (a, b) = (&traj.states[n], &traj.states[n + 1]);
            let (rows, idx) = match &self.process {
                Process::Masked { .. } => {
                    let (revealed, base) = self.masked_transition(a, b, traj.counts[n])?;
                    constant += base;
                    let rows = log_prob_rows_on_tape(tape, &self.net, self.space, a, self.masked_time(a), None)?;
                    (rows, revealed.iter().map(|&i| i * c + b[i] as usize).collect())
                }
                Process::Uniform { kernel } => {
                    let t = Self::uniform_time(n, kernel.steps);
                    let rows = log_prob_rows_on_tape(tape, &self.net, self.space, a, t, Some(kernel))?;
                    (rows, b.iter().enumerate().map(|(i, &v)| i * c + v as usize).collect())
                }
            };
            let picked = tape.gather(rows, idx)?;
            terms.push(tape.sum(picked));
        }
        let stacked = tape.stack(terms)?;
        let total = tape.sum(stacked);
        Ok(tape.add_const(total, constant))
    }

    /// `Σ log p←(X_n | X_{n+1})` under the fixed noising process.
    pub fn backward_step_log_probs(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        self.check_shape(traj)?;
        (0..traj.steps())
            .map(|n| {
                let (a, b) = (&traj.states[n], &traj.states[n + 1]);
                match &self.process {
                    Process::Masked { .. } => {
                        self.masked_transition(a, b, traj.counts[n])?;
                        let unmasked = b.iter().filter(|&&s| s != MASK).count();
                        Ok(-ln_choose(unmasked, traj.counts[n]))
                    }
                    Process::Uniform { kernel } => Ok(kernel.log_prob(b, a, self.space.c)),
                }
            })
            .collect()
    }

    /// Samples `X_0 ~ p_0` and follows the forward kernel for `N` steps.
    pub fn rollout_forward<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Trajectory> {
        let d = self.space.d;
        match &self.process {
            Process::Masked { schedule } => {
                let counts = schedule.realise(d, rng)?;
                let mut states = vec![vec![MASK; d]];
                let mut fwd = Vec::with_capacity(counts.len());
                let mut bwd = Vec::with_capacity(counts.len());
                for &k in &counts {
                    let (next, lp) = self.masked_forward_step(states.last().unwrap(), k, rng)?;
                    let unmasked = next.iter().filter(|&&s| s != MASK).count();
                    bwd.push(-ln_choose(unmasked, k));
                    fwd.push(lp);
                    states.push(next);
                }
                Ok(Trajectory {
                    states,
                    counts,
                    log_p0: 0.0,
                    forward_log_probs: fwd,
                    backward_log_probs: bwd,
                    terminal_energy: None,
                })
            }
            Process::Uniform { kernel } => {
                let c = self.space.c;
                let x0: Vec<u8> = (0..d).map(|_| rng.gen_range(0..c) as u8).collect();
                let mut states = vec![x0];
                let mut fwd = Vec::with_capacity(kernel.steps);
                let mut bwd = Vec::with_capacity(kernel.steps);
                for n in 0..kernel.steps {
                    let (next, lp) = self.uniform_forward_step(states.last().unwrap(), n, rng)?;
                    bwd.push(kernel.log_prob(&next, states.last().unwrap(), c));
                    fwd.push(lp);
                    states.push(next);
                }
                Ok(Trajectory {
                    log_p0: self.log_p0(&states[0]),
                    states,
                    counts: Vec::new(),
                    forward_log_probs: fwd,
                    backward_log_probs: bwd,
                    terminal_energy: None,
                })
            }
        }
    }

    /// Noises `x_n` back to `X_0` and records both directions' log-probabilities.
    pub fn rollout_backward<R: Rng + ?Sized>(&self, x_n: &[u8], rng: &mut R) -> Result<Trajectory> {
        self.space().check(x_n)?;
        let d = self.space.d;
        let mut traj = match &self.process {
            Process::Masked { schedule } => {
                let counts = schedule.realise(d, rng)?;
                let mut rev = vec![x_n.to_vec()];
                let mut bwd = Vec::with_capacity(counts.len());
                for &k in counts.iter().rev() {
                    let (prev, lp) = Self::masked_backward_step(rev.last().unwrap(), k, rng)?;
                    bwd.push(lp);
                    rev.push(prev);
                }
                rev.reverse();
                bwd.reverse();
                Trajectory {
                    states: rev,
                    counts,
                    log_p0: 0.0,
                    forward_log_probs: Vec::new(),
                    backward_log_probs: bwd,
                    terminal_energy: None,
                }
            }
            Process::Uniform { kernel } => {
                let c = self.space.c;
                let mut rev = vec![x_n.to_vec()];
                let mut bwd = Vec::with_capacity(kernel.steps);
                for _ in 0..kernel.steps {
                    let (prev, lp) = kernel.step(rev.last().unwrap(), c, rng);
                    bwd.push(lp);
                    rev.push(prev);
                }
                rev.reverse();
                bwd.reverse();
                Trajectory {
                    log_p0: self.log_p0(&rev[0]),
                    states: rev,
                    counts: Vec::new(),
                    forward_log_probs: Vec::new(),
                    backward_log_probs: bwd,
                    terminal_energy: None,
                }
            }
        };
        traj.forward_log_probs = self.forward_step_log_probs(&traj)?;
        Ok(traj)
    }

    /// A terminal sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<u8>> {
        Ok(self.rollout_forward(rng)?.states.pop().unwrap())
    }
}
