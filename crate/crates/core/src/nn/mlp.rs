use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::{dot, DenseMatrix};

const CHECKPOINT_MAGIC: &[u8; 8] = b"DSBNET\0\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Multilayer perceptron with `tanh` hidden activations and a linear output layer.
///
/// Parameters live in one flat vector: for each layer the weight matrix
/// (`out x in`, row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
}

impl PolicyNet {
    /// All-zero network.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "layer_dims must list at least input and output sizes, all positive: {layer_dims:?}"
            )));
        }
        let count = Self::count_params(layer_dims);
        Ok(Self { layer_dims: layer_dims.to_vec(), params: vec![0.0; count] })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        for layer in 0..net.num_layers() {
            let (fan_in, fan_out) = (layer_dims[layer], layer_dims[layer + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = net.layer_ranges(layer);
            for p in &mut net.params[w] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(layer_dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        net.set_params(params)?;
        Ok(net)
    }

    fn count_params(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Flattened parameter vector.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Index ranges of (weights, bias) for `layer` within the flat vector.
    pub fn layer_ranges(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let offset: usize = self.layer_dims[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (fan_in, fan_out) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
        let w = offset..offset + fan_in * fan_out;
        let b = w.end..w.end + fan_out;
        (w, b)
    }

    pub fn weights(&self, layer: usize) -> DenseMatrix {
        let (w, _) = self.layer_ranges(layer);
        DenseMatrix::from_vec(
            self.layer_dims[layer + 1],
            self.layer_dims[layer],
            self.params[w].to_vec(),
        )
        .expect("layer shape is consistent")
    }

    pub fn set_weights(&mut self, layer: usize, m: &DenseMatrix) -> Result<()> {
        let (w, _) = self.layer_ranges(layer);
        if m.rows() != self.layer_dims[layer + 1] || m.cols() != self.layer_dims[layer] {
            return Err(Error::config("weight matrix shape does not match layer"));
        }
        self.params[w].copy_from_slice(m.data());
        Ok(())
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (_, b) = self.layer_ranges(layer);
        &self.params[b]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b) = self.layer_ranges(layer);
        &mut self.params[b]
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::config(format!(
                "network input has length {len}, expected {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Plain forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let mut h = input.to_vec();
        for layer in 0..self.num_layers() {
            let (w, b) = self.layer_ranges(layer);
            let (fan_in, fan_out) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
            let wv = &self.params[w];
            let bv = &self.params[b];
            let last = layer + 1 == self.num_layers();
            h = (0..fan_out)
                .map(|r| {
                    let z = dot(&wv[r * fan_in..(r + 1) * fan_in], &h) + bv[r];
                    if last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
        }
        Ok(h)
    }

    /// Forward pass recorded on `tape`, which must have been created over [`Self::params`].
    pub fn forward_on_tape(&self, tape: &mut Tape<'_>, input: Var) -> Result<Var> {
        if tape.param_count() != self.param_count() {
            return Err(Error::config("tape was not built over this network's parameters"));
        }
        self.check_input(tape.value(input).len())?;
        let mut h = input;
        for layer in 0..self.num_layers() {
            let (w, b) = self.layer_ranges(layer);
            let (fan_in, fan_out) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
            let wv = tape.param(w.start, w.len())?;
            let bv = tape.param(b.start, b.len())?;
            let z = tape.matvec(wv, h, fan_out, fan_in)?;
            let z = tape.add(z, bv)?;
            h = if layer + 1 == self.num_layers() { z } else { tape.tanh(z) };
        }
        Ok(h)
    }

    /// Writes the binary checkpoint: magic, version, layer dims, parameter
    /// count, then little-endian `f64` parameters in flatten order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layer_dims.len() as u32).to_le_bytes())?;
        for &d in &self.layer_dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a network checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let n = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let dims = (0..n)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = read_u64(&mut r)? as usize;
        let mut net = Self::zeros(&dims).map_err(|e| Error::Format(e.to_string()))?;
        if count != net.param_count() {
            return Err(Error::Format(format!(
                "header declares {count} parameters, layer dims imply {}",
                net.param_count()
            )));
        }
        let mut buf = [0u8; 8];
        for p in net.params.iter_mut() {
            r.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        Ok(net)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_yield_last_bias() {
        let mut net = PolicyNet::zeros(&[3, 5, 2]).unwrap();
        net.bias_mut(1).copy_from_slice(&[0.25, -4.0]);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.25, -4.0]);
    }

    #[test]
    fn identity_single_layer() {
        let mut net = PolicyNet::zeros(&[3, 3]).unwrap();
        net.set_weights(0, &DenseMatrix::identity(3)).unwrap();
        let v = [0.1, -7.0, 2.5];
        assert_eq!(net.forward(&v).unwrap(), v.to_vec());
    }

    #[test]
    fn forward_matches_straightforward_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = PolicyNet::init(&[4, 6, 3], &mut rng).unwrap();
        let mut bias = net.clone();
        for l in 0..2 {
            for b in bias.bias_mut(l) {
                *b = rng.gen_range(-1.0..1.0);
            }
        }
        let x = [0.3, -1.2, 0.8, 2.0];
        // independent evaluation with explicit index loops
        let p = bias.params();
        let mut h = [0.0; 6];
        for i in 0..6 {
            let mut z = p[24 + i];
            for j in 0..4 {
                z += p[i * 4 + j] * x[j];
            }
            h[i] = z.tanh();
        }
        let mut out = [0.0; 3];
        for i in 0..3 {
            let mut z = p[30 + 18 + i];
            for j in 0..6 {
                z += p[30 + i * 6 + j] * h[j];
            }
            out[i] = z;
        }
        let got = bias.forward(&x).unwrap();
        for i in 0..3 {
            assert!((got[i] - out[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn input_dimension_mismatch() {
        let net = PolicyNet::zeros(&[3, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn tape_forward_agrees_with_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = PolicyNet::init(&[5, 8, 8, 4], &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.5).collect();
        let mut tape = Tape::new(net.params());
        let xv = tape.constant(x.clone());
        let out = net.forward_on_tape(&mut tape, xv).unwrap();
        let plain = net.forward(&x).unwrap();
        for (a, b) in tape.value(out).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = PolicyNet::init(&[7, 4, 2], &mut rng).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 3 * 8 + 8 + net.param_count() * 8);
        let back = PolicyNet::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        buf[0] = b'X';
        assert!(matches!(PolicyNet::read_checkpoint(buf.as_slice()), Err(Error::Format(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn flatten_perturb_unflatten(seed in 0u64..1000, idx in 0usize..1000, delta in -1.0f64..1.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let net = PolicyNet::init(&[4, 9, 3], &mut rng).unwrap();
                let mut flat = net.params().to_vec();
                let i = idx % flat.len();
                flat[i] += delta;
                let rebuilt = PolicyNet::from_params(net.layer_dims(), flat.clone()).unwrap();
                prop_assert_eq!(rebuilt.params(), flat.as_slice());
                let diff: Vec<usize> = rebuilt.params().iter().zip(net.params())
                    .enumerate().filter(|(_, (a, b))| a != b).map(|(k, _)| k).collect();
                if delta != 0.0 { prop_assert_eq!(diff, vec![i]); }
            }

            #[test]
            fn finite_input_gives_finite_output(seed in 0u64..1000, scale in 0.0f64..1e3) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let net = PolicyNet::init(&[6, 16, 16, 5], &mut rng).unwrap();
                let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-scale..=scale)).collect();
                prop_assert!(net.forward(&x).unwrap().iter().all(|v| v.is_finite()));
            }
        }
    }
}
