use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, read_u32, read_u64};

const MEANS_MAGIC: &[u8; 8] = b"DSBGMM\0\0";
const MEANS_VERSION: u32 = 1;

/// Uniform-weight mixture of identity-covariance Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(means: Vec<Vec<f64>>) -> Result<Self> {
        let dim = means.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::config("mixture needs at least one mean, all of equal positive dimension"));
        }
        Ok(Self { means })
    }

    /// `count` means with each coordinate drawn from `U[lo, hi]` using a seeded ChaCha8 stream.
    pub fn random(count: usize, dim: usize, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new((0..count).map(|_| (0..dim).map(|_| rng.gen_range(lo..hi)).collect()).collect())
    }

    /// The 40-component benchmark: means from `U[-47, 47]^D`.
    pub fn gmm40(dim: usize, seed: u64) -> Result<Self> {
        Self::random(40, dim, -47.0, 47.0, seed)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `-log Σ_i (1/K) N(x; c_i, I)`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let k = self.means.len() as f64;
        let log_norm = -0.5 * self.dim() as f64 * (2.0 * PI).ln();
        let terms: Vec<f64> = self
            .means
            .iter()
            .map(|c| {
                let sq: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                log_norm - 0.5 * sq
            })
            .collect();
        -(log_sum_exp(&terms) - k.ln())
    }

    /// Index of the nearest mean.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let dist = |c: &Vec<f64>| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..self.means.len())
            .min_by(|&a, &b| dist(&self.means[a]).total_cmp(&dist(&self.means[b])))
            .unwrap()
    }

    /// Means file: magic, version, component count, dimension, then little-endian `f64`s.
    pub fn write_means<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MEANS_MAGIC)?;
        w.write_all(&MEANS_VERSION.to_le_bytes())?;
        w.write_all(&(self.means.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for v in self.means.iter().flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_means<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MEANS_MAGIC {
            return Err(Error::Format("not a mixture means file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MEANS_VERSION {
            return Err(Error::Format(format!("means file version {version}")));
        }
        let count = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        if count == 0 || dim == 0 || count * dim > 1 << 24 {
            return Err(Error::Format(format!("implausible means shape {count}x{dim}")));
        }
        let mut buf = [0u8; 8];
        let mut means = Vec::with_capacity(count);
        for _ in 0..count {
            let mut m = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut buf)?;
                m.push(f64::from_le_bytes(buf));
            }
            means.push(m);
        }
        Self::new(means)
    }
}

/// Energies on `R^D` that get discretised through a Gray code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContinuousEnergy {
    /// One-dimensional `x⁴ − 6x² − 0.5x`.
    DoubleWell,
    /// `D/2` double wells on even coordinates, standard Gaussians on odd ones.
    ManyWell,
    /// ManyWell with each coordinate pair rotated by π/4.
    RotatedManyWell,
    Mixture(GaussianMixture),
}

pub fn doublewell(x: f64) -> f64 {
    x.powi(4) - 6.0 * x * x - 0.5 * x
}

impl ContinuousEnergy {
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let ok = match self {
            ContinuousEnergy::DoubleWell => dim == 1,
            ContinuousEnergy::ManyWell | ContinuousEnergy::RotatedManyWell => dim >= 2 && dim % 2 == 0,
            ContinuousEnergy::Mixture(g) => g.dim() == dim,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("{self:?} is not defined in dimension {dim}")))
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ContinuousEnergy::DoubleWell => doublewell(x[0]),
            ContinuousEnergy::ManyWell => x
                .chunks(2)
                .map(|p| doublewell(p[0]) + 0.5 * p[1] * p[1])
                .sum(),
            ContinuousEnergy::RotatedManyWell => x
                .chunks(2)
                .map(|p| {
                    let u = (p[0] + p[1]) / SQRT_2;
                    let v = (-p[0] + p[1]) / SQRT_2;
                    doublewell(u) + 0.5 * v * v
                })
                .sum(),
            ContinuousEnergy::Mixture(g) => g.energy(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doublewell_values() {
        assert_eq!(doublewell(0.0), 0.0);
        assert_eq!(doublewell(1.0), -5.5);
    }

    #[test]
    fn manywell_sums_pairs() {
        let x = [1.0, 2.0, -0.5, 0.0];
        let expected = doublewell(1.0) + 2.0 + doublewell(-0.5);
        assert!((ContinuousEnergy::ManyWell.eval(&x) - expected).abs() < 1e-14);
    }

    #[test]
    fn rotated_manywell_is_manywell_in_rotated_frame() {
        let (u, v) = (1.3, -0.4);
        // inverse rotation of (u, v)
        let x = [(u - v) / SQRT_2, (u + v) / SQRT_2];
        let rot = ContinuousEnergy::RotatedManyWell.eval(&x);
        let plain = ContinuousEnergy::ManyWell.eval(&[u, v]);
        assert!((rot - plain).abs() < 1e-12);
    }

    #[test]
    fn gmm_at_component_mean() {
        let g = GaussianMixture::gmm40(2, 0).unwrap();
        let i = 7;
        let c = g.means[i].clone();
        // brute-force density evaluation
        let density: f64 = g
            .means
            .iter()
            .map(|m| {
                let sq: f64 = c.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                (2.0 * PI).powf(-1.0) * (-0.5 * sq).exp() / 40.0
            })
            .sum();
        let mut closed = 1.0;
        for (j, m) in g.means.iter().enumerate() {
            if j != i {
                let sq: f64 = c.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                closed += (-0.5 * sq).exp();
            }
        }
        let closed = -((1.0 / 40.0) * (2.0 * PI).powf(-1.0) * closed).ln();
        assert!((g.energy(&c) + density.ln()).abs() < 1e-12);
        assert!((g.energy(&c) - closed).abs() < 1e-12);
    }

    #[test]
    fn gmm40_means_are_reproducible_and_bounded() {
        let a = GaussianMixture::gmm40(4, 123).unwrap();
        let b = GaussianMixture::gmm40(4, 123).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.means.len(), 40);
        assert!(a.means.iter().flatten().all(|v| (-47.0..47.0).contains(v)));
    }

    #[test]
    fn means_file_round_trip() {
        let g = GaussianMixture::gmm40(2, 9).unwrap();
        let mut buf = Vec::new();
        g.write_means(&mut buf).unwrap();
        assert_eq!(GaussianMixture::read_means(buf.as_slice()).unwrap(), g);
        assert!(GaussianMixture::read_means(&buf[..10]).is_err());
    }

    #[test]
    fn dimension_checks() {
        assert!(ContinuousEnergy::ManyWell.check_dim(3).is_err());
        assert!(ContinuousEnergy::DoubleWell.check_dim(1).is_ok());
    }
}
