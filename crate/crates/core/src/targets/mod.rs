//! Pointwise-queryable target energies and the exact enumeration oracle.
//!
//! Symbols are stored 0-based internally: a space with vocabulary `C` uses
//! symbols `0..C`. Lattice spin `s ∈ {1..q}` is stored as `s - 1`; Gray-coded
//! targets use the bits `{0, 1}` directly.

mod continuous;
pub(crate) mod enumerate;
mod gray;
mod lattice;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use continuous::{ContinuousEnergy, GaussianMixture};
pub use enumerate::{EnumerationOracle, ENUMERATION_LIMIT};
pub use gray::{gray_decode, gray_encode, GrayCodeConfig, GrayTarget};
pub use lattice::{LatticeParams, LatticeTarget};

/// Shape of the discrete state space `{0..C}^d`, optionally extended with a mask symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    pub d: usize,
    pub c: usize,
    pub has_mask: bool,
}

impl StateSpace {
    pub fn new(d: usize, c: usize) -> Result<Self> {
        if d == 0 || c < 2 || c > 255 {
            return Err(Error::config(format!("state space needs d >= 1 and 2 <= C <= 255 (d={d}, C={c})")));
        }
        Ok(Self { d, c, has_mask: false })
    }

    pub fn with_mask(self) -> Self {
        Self { has_mask: true, ..self }
    }

    /// Number of terminal states, `C^d`, saturating.
    pub fn size(&self) -> u128 {
        (self.c as u128).checked_pow(self.d as u32).unwrap_or(u128::MAX)
    }

    /// Checks `x` is a terminal (mask-free) state of this space.
    pub fn check(&self, x: &[u8]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::domain(format!("state has length {}, expected {}", x.len(), self.d)));
        }
        if let Some(&s) = x.iter().find(|&&s| s as usize >= self.c) {
            return Err(Error::domain(format!("symbol {s} outside 0..{}", self.c)));
        }
        Ok(())
    }
}

/// An unnormalised target `p(x) ∝ exp(-E(x))` over a discrete space.
pub trait Energy: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn space(&self) -> StateSpace;

    fn energy(&self, x: &[u8]) -> Result<f64>;

    fn energies(&self, xs: &[Vec<u8>]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.energy(x)).collect()
    }

    /// Lattice parameters when the target is a Potts/Ising model.
    fn lattice(&self) -> Option<LatticeParams> {
        None
    }

    /// Real-valued decoding for discretised continuous targets.
    fn decode(&self, _x: &[u8]) -> Option<Vec<f64>> {
        None
    }
}

pub type SharedEnergy = Arc<dyn Energy>;

/// Target defined by a closure; mostly for toy problems and tests.
pub struct FnEnergy {
    name: String,
    space: StateSpace,
    f: Box<dyn Fn(&[u8]) -> f64 + Send + Sync>,
}

impl FnEnergy {
    pub fn new(
        name: impl Into<String>,
        space: StateSpace,
        f: impl Fn(&[u8]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), space, f: Box::new(f) }
    }

    /// Energy given by a table indexed like [`EnumerationOracle::index_of`].
    pub fn table(name: impl Into<String>, space: StateSpace, table: Vec<f64>) -> Result<Self> {
        if table.len() as u128 != space.size() {
            return Err(Error::config("energy table size differs from C^d"));
        }
        let c = space.c;
        Ok(Self::new(name, space, move |x| table[enumerate::index_of(x, c)]))
    }
}

impl fmt::Debug for FnEnergy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnEnergy").field("name", &self.name).field("space", &self.space).finish()
    }
}

impl Energy for FnEnergy {
    fn name(&self) -> &str {
        &self.name
    }

    fn space(&self) -> StateSpace {
        self.space
    }

    fn energy(&self, x: &[u8]) -> Result<f64> {
        self.space.check(x)?;
        Ok((self.f)(x))
    }
}

/// `β · E(x)` for an inner target; used for temperature annealing.
#[derive(Debug, Clone, Copy)]
pub struct Tempered<'a> {
    pub inner: &'a dyn Energy,
    pub beta: f64,
}

impl Energy for Tempered<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn space(&self) -> StateSpace {
        self.inner.space()
    }

    fn energy(&self, x: &[u8]) -> Result<f64> {
        Ok(self.beta * self.inner.energy(x)?)
    }

    fn energies(&self, xs: &[Vec<u8>]) -> Result<Vec<f64>> {
        let mut e = self.inner.energies(xs)?;
        for v in &mut e {
            *v *= self.beta;
        }
        Ok(e)
    }

    fn lattice(&self) -> Option<LatticeParams> {
        self.inner.lattice().map(|p| LatticeParams { beta: p.beta * self.beta, ..p })
    }

    fn decode(&self, x: &[u8]) -> Option<Vec<f64>> {
        self.inner.decode(x)
    }
}
