//! Network input encoding and per-position categorical kernels.

use crate::diffusion::{UniformKernel, MASK};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_in_place, PolicyNet, Tape, Var};
use crate::targets::StateSpace;

fn channels(space: StateSpace) -> usize {
    space.c + space.has_mask as usize
}

/// One-hot symbols (plus a mask channel when the space has one) and a time scalar.
pub fn input_dim(space: StateSpace) -> usize {
    space.d * channels(space) + 1
}

pub fn layer_dims(space: StateSpace, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![input_dim(space)];
    dims.extend_from_slice(hidden);
    dims.push(space.d * space.c);
    dims
}

pub fn encode(x: &[u8], space: StateSpace, time: f64) -> Vec<f64> {
    let ch = channels(space);
    let mut v = vec![0.0; space.d * ch + 1];
    for (i, &s) in x.iter().enumerate() {
        let slot = if s == MASK { space.c } else { s as usize };
        v[i * ch + slot] = 1.0;
    }
    v[space.d * ch] = time;
    v
}

pub(crate) fn check_net(net: &PolicyNet, space: StateSpace) -> Result<()> {
    if net.input_dim() != input_dim(space) || net.output_dim() != space.d * space.c {
        return Err(Error::config(format!(
            "network maps {} -> {}, state space needs {} -> {}",
            net.input_dim(),
            net.output_dim(),
            input_dim(space),
            space.d * space.c
        )));
    }
    Ok(())
}

/// Row-major `d x C` log-probabilities; with `reference`, the network output
/// is added to the reference kernel's log-probabilities before normalising.
pub fn log_prob_rows(
    net: &PolicyNet,
    space: StateSpace,
    x: &[u8],
    time: f64,
    reference: Option<&UniformKernel>,
) -> Result<Vec<f64>> {
    let mut logits = net.forward(&encode(x, space, time))?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite policy logits".into()));
    }
    if let Some(k) = reference {
        for (l, r) in logits.iter_mut().zip(k.log_prob_rows(x, space.c)) {
            *l += r;
        }
    }
    for row in logits.chunks_mut(space.c) {
        log_softmax_in_place(row);
    }
    Ok(logits)
}

pub fn log_prob_rows_on_tape(
    tape: &mut Tape<'_>,
    net: &PolicyNet,
    space: StateSpace,
    x: &[u8],
    time: f64,
    reference: Option<&UniformKernel>,
) -> Result<Var> {
    let input = tape.constant(encode(x, space, time));
    let mut logits = net.forward_on_tape(tape, input)?;
    if tape.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite policy logits".into()));
    }
    if let Some(k) = reference {
        let r = tape.constant(k.log_prob_rows(x, space.c));
        logits = tape.add(logits, r)?;
    }
    tape.log_softmax_rows(logits, space.c)
}
