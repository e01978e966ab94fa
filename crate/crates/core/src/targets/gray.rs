use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::{ContinuousEnergy, Energy, StateSpace};

/// Reflected binary Gray code of `k`, most significant bit first.
pub fn gray_encode(k: u32, bits: u32) -> Result<Vec<u8>> {
    if bits == 0 || bits > 31 {
        return Err(Error::domain(format!("bit width {bits} outside 1..=31")));
    }
    if k >= 1 << bits {
        return Err(Error::domain(format!("{k} does not fit in {bits} bits")));
    }
    let g = k ^ (k >> 1);
    Ok((0..bits).rev().map(|i| ((g >> i) & 1) as u8).collect())
}

/// Inverse of [`gray_encode`].
pub fn gray_decode(code: &[u8]) -> Result<u32> {
    if code.is_empty() || code.len() > 31 {
        return Err(Error::domain(format!("code length {} outside 1..=31", code.len())));
    }
    let mut k = 0u32;
    let mut prev = 0u32;
    for &bit in code {
        if bit > 1 {
            return Err(Error::domain(format!("non-binary symbol {bit} in Gray code")));
        }
        prev ^= bit as u32;
        k = (k << 1) | prev;
    }
    Ok(k)
}

/// Gray-code discretisation of `[-R, R]^D` into `2^b` bins per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrayCodeConfig {
    pub dims: usize,
    pub bits: u32,
    pub half_width: f64,
}

impl GrayCodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.bits == 0 || self.bits > 16 || !(self.half_width > 0.0) {
            return Err(Error::config(format!("invalid Gray-code config {self:?}")));
        }
        Ok(())
    }

    pub fn discrete_dim(&self) -> usize {
        self.dims * self.bits as usize
    }

    /// `2R / 2^b`, equivalently `R / 2^(b-1)`.
    pub fn bin_width(&self) -> f64 {
        2.0 * self.half_width / (1u64 << self.bits) as f64
    }

    pub fn bin_centre(&self, k: u32) -> f64 {
        (k as f64 + 0.5) / (1u64 << self.bits) as f64 * 2.0 * self.half_width - self.half_width
    }

    /// Maps each `b`-bit block to its bin centre.
    pub fn decode(&self, x: &[u8]) -> Result<Vec<f64>> {
        if x.len() != self.discrete_dim() {
            return Err(Error::domain(format!(
                "Gray state has {} bits, expected {}",
                x.len(),
                self.discrete_dim()
            )));
        }
        x.chunks(self.bits as usize)
            .map(|block| gray_decode(block).map(|k| self.bin_centre(k)))
            .collect()
    }

    /// Nearest bin encoding of a real vector (clamped to `[-R, R]`).
    pub fn encode(&self, v: &[f64]) -> Result<Vec<u8>> {
        if v.len() != self.dims {
            return Err(Error::domain("real vector dimension mismatch"));
        }
        let nbins = 1u32 << self.bits;
        let mut out = Vec::with_capacity(self.discrete_dim());
        for &t in v {
            let u = ((t + self.half_width) / self.bin_width()).floor();
            let k = u.clamp(0.0, (nbins - 1) as f64) as u32;
            out.extend(gray_encode(k, self.bits)?);
        }
        Ok(out)
    }
}

/// `E(x) = Ẽ(centres(x)) - D·log(bin width)`.
#[derive(Debug, Clone)]
pub struct GrayTarget {
    name: String,
    cfg: GrayCodeConfig,
    energy: ContinuousEnergy,
}

impl GrayTarget {
    pub fn new(name: impl Into<String>, cfg: GrayCodeConfig, energy: ContinuousEnergy) -> Result<Self> {
        cfg.validate()?;
        energy.check_dim(cfg.dims)?;
        Ok(Self { name: name.into(), cfg, energy })
    }

    pub fn config(&self) -> &GrayCodeConfig {
        &self.cfg
    }

    pub fn continuous(&self) -> &ContinuousEnergy {
        &self.energy
    }
}

impl Energy for GrayTarget {
    fn name(&self) -> &str {
        &self.name
    }

    fn space(&self) -> StateSpace {
        StateSpace { d: self.cfg.discrete_dim(), c: 2, has_mask: false }
    }

    fn energy(&self, x: &[u8]) -> Result<f64> {
        let centres = self.cfg.decode(x)?;
        Ok(self.energy.eval(&centres) - self.cfg.dims as f64 * self.cfg.bin_width().ln())
    }

    fn decode(&self, x: &[u8]) -> Option<Vec<f64>> {
        self.cfg.decode(x).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &str) -> Vec<u8> {
        s.bytes().map(|b| b - b'0').collect()
    }

    #[test]
    fn table_values() {
        let expected = ["000", "001", "011", "010", "110", "111", "101", "100"];
        for (k, e) in expected.iter().enumerate() {
            assert_eq!(gray_encode(k as u32, 3).unwrap(), bits(e));
        }
        assert_eq!(gray_encode(0, 6).unwrap(), vec![0; 6]);
    }

    #[test]
    fn bijection_and_single_bit_adjacency() {
        for b in 1..=8u32 {
            let n = 1u32 << b;
            let mut seen = std::collections::HashSet::new();
            for k in 0..n {
                let code = gray_encode(k, b).unwrap();
                assert_eq!(gray_decode(&code).unwrap(), k);
                assert!(seen.insert(code.clone()));
                if k + 1 < n {
                    let next = gray_encode(k + 1, b).unwrap();
                    let diff = code.iter().zip(&next).filter(|(a, b)| a != b).count();
                    assert_eq!(diff, 1);
                }
            }
        }
    }

    #[test]
    fn out_of_range_is_domain_error() {
        assert!(matches!(gray_encode(8, 3), Err(Error::Domain(_))));
        assert!(matches!(gray_decode(&[0, 2]), Err(Error::Domain(_))));
    }

    #[test]
    fn bin_centres() {
        let cfg = GrayCodeConfig { dims: 1, bits: 3, half_width: 4.0 };
        let x = gray_encode(4, 3).unwrap();
        assert_eq!(cfg.decode(&x).unwrap(), vec![0.5]);
        assert_eq!(cfg.bin_width(), 1.0);

        let cfg = GrayCodeConfig { dims: 1, bits: 1, half_width: 1.0 };
        assert_eq!(cfg.decode(&[0]).unwrap(), vec![-0.5]);
    }

    #[test]
    fn discretised_energy_subtracts_log_bin_width() {
        let cfg = GrayCodeConfig { dims: 1, bits: 3, half_width: 4.0 };
        let t = GrayTarget::new("dw", cfg, ContinuousEnergy::DoubleWell).unwrap();
        let x = gray_encode(4, 3).unwrap();
        let expected = 0.5f64.powi(4) - 6.0 * 0.25 - 0.25 - 1.0f64.ln();
        assert!((t.energy(&x).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn encode_round_trips_centres() {
        let cfg = GrayCodeConfig { dims: 2, bits: 4, half_width: 3.0 };
        for k in 0..16 {
            for j in 0..16 {
                let v = [cfg.bin_centre(k), cfg.bin_centre(j)];
                let x = cfg.encode(&v).unwrap();
                assert_eq!(cfg.decode(&x).unwrap(), v.to_vec());
            }
        }
    }
}
