//! Second-moment path-space losses (trajectory balance and log-variance)
//! and importance weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSampler, Trajectory};
use crate::error::{Error, Result};
use crate::nn::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `c` is a learned scalar.
    Tb,
    /// `c` is the batch mean of the log-ratios.
    Lv,
}

/// `log[(p_0 ⊗ p→)(τ)] - log[e^{-E(X_N)} p←(τ | X_N)]`.
pub fn log_ratio(traj: &Trajectory) -> Result<f64> {
    let energy = traj
        .terminal_energy
        .ok_or_else(|| Error::domain("trajectory has no terminal energy"))?;
    if traj.forward_log_probs.len() != traj.steps() || traj.backward_log_probs.len() != traj.steps() {
        return Err(Error::domain("trajectory is missing per-step log-probabilities"));
    }
    Ok(traj.forward_log_prob() + energy - traj.backward_log_prob())
}

/// `log w = -log_ratio`.
pub fn log_importance_weight(traj: &Trajectory) -> Result<f64> {
    Ok(-log_ratio(traj)?)
}

/// Loss value with `∂loss/∂ℓ_m` for each trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment {
    pub loss: f64,
    /// The `c` actually used (the batch mean under LV).
    pub c: f64,
    pub seeds: Vec<f64>,
    /// `∂loss/∂c`; zero under LV, where `c` is not a parameter.
    pub dc: f64,
}

/// `mean_m (ℓ_m - c)²`; under LV `c` is replaced by `mean(ℓ)` and held constant.
pub fn second_moment(log_ratios: &[f64], kind: LossKind, c: f64) -> Result<SecondMoment> {
    let m = log_ratios.len();
    if m == 0 {
        return Err(Error::config("empty batch"));
    }
    if kind == LossKind::Lv && m < 2 {
        return Err(Error::config("log-variance loss needs at least two trajectories"));
    }
    if let Some(i) = log_ratios.iter().position(|v| !v.is_finite()) {
        return Err(Error::Training(format!("log-ratio of trajectory {i} is not finite")));
    }
    let c = match kind {
        LossKind::Tb => c,
        LossKind::Lv => log_ratios.iter().sum::<f64>() / m as f64,
    };
    let resid: Vec<f64> = log_ratios.iter().map(|l| l - c).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / m as f64;
    let seeds: Vec<f64> = resid.iter().map(|r| 2.0 * r / m as f64).collect();
    let dc = match kind {
        LossKind::Tb => -seeds.iter().sum::<f64>(),
        LossKind::Lv => 0.0,
    };
    Ok(SecondMoment { loss, c, seeds, dc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub c: f64,
    pub dc: f64,
    /// Gradient with respect to the forward network parameters.
    pub grad: Vec<f64>,
    pub log_ratios: Vec<f64>,
}

/// Loss over a batch of trajectories and its gradient through the forward
/// kernel. Trajectories are treated as fixed data, whatever produced them.
pub fn loss_and_grad(
    sampler: &DiffusionSampler,
    batch: &[Trajectory],
    kind: LossKind,
    c: f64,
) -> Result<LossGrad> {
    let params = sampler.net().params();
    // one tape per trajectory: values first, then seeded backward passes
    let tapes: Vec<(Tape<'_>, crate::nn::Var, f64)> = batch
        .par_iter()
        .map(|traj| {
            let mut tape = Tape::new(params);
            let fwd = sampler.forward_log_prob_on_tape(&mut tape, traj)?;
            let energy = traj
                .terminal_energy
                .ok_or_else(|| Error::domain("trajectory has no terminal energy"))?;
            let lr = tape.scalar(fwd) + energy - traj.backward_log_prob();
            Ok((tape, fwd, lr))
        })
        .collect::<Result<_>>()?;
    let log_ratios: Vec<f64> = tapes.iter().map(|t| t.2).collect();
    let sm = second_moment(&log_ratios, kind, c)?;
    let grads: Vec<Vec<f64>> = tapes
        .par_iter()
        .zip(&sm.seeds)
        .map(|((tape, fwd, _), &seed)| tape.backward_seeded(*fwd, seed))
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.len()];
    for g in &grads {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(LossGrad { loss: sm.loss, c: sm.c, dc: sm.dc, grad, log_ratios })
}

/// Loss value alone, re-evaluating every forward log-probability from the states.
pub fn loss_value(sampler: &DiffusionSampler, batch: &[Trajectory], kind: LossKind, c: f64) -> Result<f64> {
    let lrs = batch
        .iter()
        .map(|t| {
            let energy = t.terminal_energy.ok_or_else(|| Error::domain("trajectory has no terminal energy"))?;
            Ok(sampler.forward_log_prob(t)? + energy - t.backward_log_prob())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(second_moment(&lrs, kind, c)?.loss)
}
