//! Importance-weighted replay buffer and the MCMC buffer.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{read_u32, read_u64};

const SNAPSHOT_MAGIC: &[u8; 8] = b"DSBBUF\0\0";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub state: Vec<u8>,
    pub log_w: f64,
    pub epoch: u64,
}

/// Bounded FIFO of terminal states with frozen log importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer capacity must be at least 1"));
        }
        Ok(Self { capacity, entries: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.iter()
    }

    pub fn insert_batch(&mut self, batch: impl IntoIterator<Item = ReplayEntry>) -> Result<()> {
        for e in batch {
            if !e.log_w.is_finite() {
                return Err(Error::State(format!("non-finite log weight {}", e.log_w)));
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(e);
        }
        Ok(())
    }

    /// `m` draws with replacement, entry `j` chosen with probability ∝ `w_j`.
    pub fn sample_prioritised<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Vec<&ReplayEntry>> {
        if self.entries.is_empty() {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        let max = self.entries.iter().map(|e| e.log_w).fold(f64::NEG_INFINITY, f64::max);
        let dist = WeightedIndex::new(self.entries.iter().map(|e| (e.log_w - max).exp()))
            .map_err(|e| Error::State(format!("replay weights: {e}")))?;
        Ok((0..m).map(|_| &self.entries[dist.sample(rng)]).collect())
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.state.len() as u32).to_le_bytes())?;
            w.write_all(&e.state)?;
            w.write_all(&e.log_w.to_le_bytes())?;
            w.write_all(&e.epoch.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Format("not a replay buffer snapshot".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let mut buf = Self::new(read_u64(&mut r)? as usize)?;
        let n = read_u64(&mut r)? as usize;
        for _ in 0..n {
            let d = read_u32(&mut r)? as usize;
            let mut state = vec![0u8; d];
            r.read_exact(&mut state)?;
            let mut f = [0u8; 8];
            r.read_exact(&mut f)?;
            let log_w = f64::from_le_bytes(f);
            let epoch = read_u64(&mut r)?;
            buf.insert_batch([ReplayEntry { state, log_w, epoch }])?;
        }
        Ok(buf)
    }
}

/// Bounded FIFO of MCMC-refined terminal states.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcBuffer {
    capacity: usize,
    states: VecDeque<Vec<u8>>,
}

impl McmcBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer capacity must be at least 1"));
        }
        Ok(Self { capacity, states: VecDeque::new() })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn states(&self) -> impl Iterator<Item = &Vec<u8>> {
        self.states.iter()
    }

    pub fn insert_batch(&mut self, batch: impl IntoIterator<Item = Vec<u8>>) {
        for s in batch {
            if self.states.len() == self.capacity {
                self.states.pop_front();
            }
            self.states.push_back(s);
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Vec<&Vec<u8>>> {
        if self.states.is_empty() {
            return Err(Error::State("cannot sample from an empty MCMC buffer".into()));
        }
        Ok((0..m).map(|_| &self.states[rng.gen_range(0..self.states.len())]).collect())
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&(self.states.len() as u64).to_le_bytes())?;
        for s in &self.states {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s)?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC || read_u32(&mut r)? != SNAPSHOT_VERSION {
            return Err(Error::Format("not an MCMC buffer snapshot".into()));
        }
        let mut buf = Self::new(read_u64(&mut r)? as usize)?;
        let n = read_u64(&mut r)? as usize;
        for _ in 0..n {
            let d = read_u32(&mut r)? as usize;
            let mut state = vec![0u8; d];
            r.read_exact(&mut state)?;
            buf.insert_batch([state]);
        }
        Ok(buf)
    }
}

/// `M' = min(⌈rM⌉, |B_MCMC|)` uniform draws from the MCMC buffer followed by
/// `M - M'` prioritised draws from the replay buffer.
pub fn assemble_offpolicy_batch<R: Rng + ?Sized>(
    replay: &ReplayBuffer,
    mcmc: &McmcBuffer,
    m: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<Vec<u8>>> {
    if replay.is_empty() {
        return Err(Error::State("off-policy batch needs a non-empty replay buffer".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("MCMC sample ratio {ratio} outside [0, 1]")));
    }
    // the tolerance keeps products like 0.1 * 30 from rounding up past an integer
    let from_mcmc = ((ratio * m as f64 - 1e-9).ceil().max(0.0) as usize).min(mcmc.len()).min(m);
    let mut out = Vec::with_capacity(m);
    if from_mcmc > 0 {
        out.extend(mcmc.sample_uniform(from_mcmc, rng)?.into_iter().cloned());
    }
    out.extend(replay.sample_prioritised(m - from_mcmc, rng)?.into_iter().map(|e| e.state.clone()));
    Ok(out)
}
