use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::{Energy, StateSpace};

/// Toroidal `L x L` Potts lattice with `H(x) = -J Σ_{i~j} 1[x_i = x_j]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeParams {
    pub side: usize,
    pub q: usize,
    /// Per-edge agreement coefficient (1/2 for Ising, 1 for Potts).
    pub j: f64,
    pub beta: f64,
}

impl LatticeParams {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.side < 2 {
            bad.push(format!("lattice side {} < 2", self.side));
        }
        if self.q < 2 || self.q > 255 {
            bad.push(format!("spin count q={} outside 2..=255", self.q));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            bad.push(format!("beta={} must be positive", self.beta));
        }
        if !self.j.is_finite() {
            bad.push("J must be finite".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn sites(&self) -> usize {
        self.side * self.side
    }

    /// Right and down neighbours of each site: every unordered toroidal edge exactly once.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let l = self.side;
        (0..l).flat_map(move |r| {
            (0..l).flat_map(move |c| {
                let i = r * l + c;
                [(i, r * l + (c + 1) % l), (i, ((r + 1) % l) * l + c)]
            })
        })
    }

    /// `H(x)` without the inverse temperature.
    pub fn hamiltonian(&self, x: &[u8]) -> Result<f64> {
        if x.len() != self.sites() {
            return Err(Error::domain(format!(
                "lattice state has {} sites, expected {}",
                x.len(),
                self.sites()
            )));
        }
        if let Some(&s) = x.iter().find(|&&s| s as usize >= self.q) {
            return Err(Error::domain(format!("spin {} outside 1..={}", s as usize + 1, self.q)));
        }
        let agree = self.edges().filter(|&(a, b)| x[a] == x[b]).count();
        Ok(-self.j * agree as f64)
    }
}

#[derive(Debug, Clone)]
pub struct LatticeTarget {
    name: String,
    params: LatticeParams,
}

impl LatticeTarget {
    pub fn new(name: impl Into<String>, params: LatticeParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { name: name.into(), params })
    }

    /// Ising model: `q = 2`, `J = 1/2`.
    pub fn ising(side: usize, beta: f64) -> Result<Self> {
        Self::new(
            format!("ising{side}-b{beta}"),
            LatticeParams { side, q: 2, j: 0.5, beta },
        )
    }

    /// Potts model with `J = 1`.
    pub fn potts(side: usize, q: usize, beta: f64) -> Result<Self> {
        Self::new(format!("potts{side}-q{q}-b{beta}"), LatticeParams { side, q, j: 1.0, beta })
    }

    pub fn params(&self) -> &LatticeParams {
        &self.params
    }
}

impl Energy for LatticeTarget {
    fn name(&self) -> &str {
        &self.name
    }

    fn space(&self) -> StateSpace {
        StateSpace { d: self.params.sites(), c: self.params.q, has_mask: false }
    }

    /// `β · H(x)`.
    fn energy(&self, x: &[u8]) -> Result<f64> {
        Ok(self.params.beta * self.params.hamiltonian(x)?)
    }

    fn lattice(&self) -> Option<LatticeParams> {
        Some(self.params)
    }
}
