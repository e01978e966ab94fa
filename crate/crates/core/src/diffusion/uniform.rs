use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform noising: each position keeps its value with probability
/// `1 - p_flip`, otherwise moves to one of the `C - 1` other values uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformKernel {
    pub p_flip: f64,
    pub steps: usize,
}

impl UniformKernel {
    pub fn new(p_flip: f64, steps: usize) -> Result<Self> {
        let k = Self { p_flip, steps };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_flip > 0.0 && self.p_flip < 1.0) {
            return Err(Error::config(format!("p_flip={} must lie in (0, 1)", self.p_flip)));
        }
        if self.steps == 0 {
            return Err(Error::config("uniform diffusion needs at least one step"));
        }
        Ok(())
    }

    /// `log Q(to | from)` for one position.
    pub fn log_prob_symbol(&self, from: u8, to: u8, c: usize) -> f64 {
        if from == to {
            (1.0 - self.p_flip).ln()
        } else {
            (self.p_flip / (c - 1) as f64).ln()
        }
    }

    /// `log Q(to | from)` for a whole state.
    pub fn log_prob(&self, from: &[u8], to: &[u8], c: usize) -> f64 {
        from.iter().zip(to).map(|(&a, &b)| self.log_prob_symbol(a, b, c)).sum()
    }

    /// Row-major `d x C` table of `log Q(v | x_i)`.
    pub fn log_prob_rows(&self, x: &[u8], c: usize) -> Vec<f64> {
        let stay = (1.0 - self.p_flip).ln();
        let change = (self.p_flip / (c - 1) as f64).ln();
        let mut rows = vec![change; x.len() * c];
        for (i, &s) in x.iter().enumerate() {
            rows[i * c + s as usize] = stay;
        }
        rows
    }

    /// One noising step; returns the new state and its log-probability.
    pub fn step<R: Rng + ?Sized>(&self, x: &[u8], c: usize, rng: &mut R) -> (Vec<u8>, f64) {
        let mut out = x.to_vec();
        for s in out.iter_mut() {
            if rng.gen::<f64>() < self.p_flip {
                let other = rng.gen_range(0..c - 1) as u8;
                *s = if other >= *s { other + 1 } else { other };
            }
        }
        let lp = self.log_prob(x, &out, c);
        (out, lp)
    }
}
