use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step unmask counts `k_1..k_N` with `Σ k_n = d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskingSchedule {
    Fixed { counts: Vec<usize> },
    /// Each step draws `k` uniformly from `k_min..=k_max`; the last step is
    /// truncated so the counts sum to `d`.
    Random { k_min: usize, k_max: usize },
}

impl MaskingSchedule {
    /// One position per step.
    pub fn single_step(d: usize) -> Self {
        MaskingSchedule::Fixed { counts: vec![1; d] }
    }

    /// `k` positions per step with a shorter final step when `k ∤ d`.
    pub fn uniform_blocks(d: usize, k: usize) -> Self {
        let k = k.max(1);
        let mut counts = vec![k; d / k];
        if d % k != 0 {
            counts.push(d % k);
        }
        MaskingSchedule::Fixed { counts }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            MaskingSchedule::Fixed { counts } => {
                if counts.iter().any(|&k| k == 0) {
                    return Err(Error::Schedule("every step must unmask at least one position".into()));
                }
                let total: usize = counts.iter().sum();
                if total != d {
                    return Err(Error::Schedule(format!("unmask counts sum to {total}, expected d={d}")));
                }
            }
            MaskingSchedule::Random { k_min, k_max } => {
                if *k_min == 0 || k_min > k_max {
                    return Err(Error::Schedule(format!(
                        "random schedule needs 1 <= k_min <= k_max (got {k_min}, {k_max})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Draws the counts for one trajectory.
    pub fn realise<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Result<Vec<usize>> {
        self.validate(d)?;
        match self {
            MaskingSchedule::Fixed { counts } => Ok(counts.clone()),
            MaskingSchedule::Random { k_min, k_max } => {
                let mut counts = Vec::new();
                let mut remaining = d;
                while remaining > 0 {
                    let k = rng.gen_range(*k_min..=*k_max).min(remaining);
                    counts.push(k);
                    remaining -= k;
                }
                Ok(counts)
            }
        }
    }

    /// Every realisable count sequence with its probability.
    pub fn distribution(&self, d: usize) -> Result<Vec<(Vec<usize>, f64)>> {
        self.validate(d)?;
        match self {
            MaskingSchedule::Fixed { counts } => Ok(vec![(counts.clone(), 1.0)]),
            MaskingSchedule::Random { k_min, k_max } => {
                let width = (k_max - k_min + 1) as f64;
                let mut out = Vec::new();
                let mut stack = vec![(Vec::new(), d, 1.0)];
                while let Some((prefix, remaining, p)) = stack.pop() {
                    if remaining == 0 {
                        out.push((prefix, p));
                        continue;
                    }
                    // draws at or above `remaining` all truncate to it
                    let truncating = (*k_min..=*k_max).filter(|&k| k >= remaining).count();
                    if truncating > 0 {
                        let mut next = prefix.clone();
                        next.push(remaining);
                        stack.push((next, 0, p * truncating as f64 / width));
                    }
                    for k in *k_min..=(*k_max).min(remaining - 1) {
                        let mut next = prefix.clone();
                        next.push(k);
                        stack.push((next, remaining - k, p / width));
                    }
                }
                Ok(out)
            }
        }
    }
}
