//! A small matrix-layer network with hand-written backpropagation through
//! the regularized least-squares reconstruction loss.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aoa::{covariance_features, loss_and_gradient, SignalBatch};
use crate::error::{ensure, Error, Result};
use crate::rng::{counter_normal, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn slope(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

/// `out = act(W f)`, with `W` of shape `m x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLayer {
    pub w: DMatrix<f64>,
    pub activation: Activation,
    pub layer_index: usize,
}

/// Parameter-free map from the group means `z` to angles in `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// `theta_u = c + h tanh(z_u)`, each output on its own.
    #[default]
    Tanh,
    /// Stick-breaking over the support: `theta_0 = lo`,
    /// `theta_u = theta_{u-1} + (hi - theta_{u-1}) sigmoid(z_u)`, so the
    /// outputs come out sorted and each tracks one order statistic.
    Ordered,
}

impl Head {
    fn code(self) -> u8 {
        match self {
            Head::Tanh => 0,
            Head::Ordered => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Head::Tanh),
            1 => Ok(Head::Ordered),
            _ => Err(Error::Format(format!("unknown head code {c}"))),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    0.5 * (1.0 + (0.5 * z).tanh())
}

/// Stacked matrix layers followed by a parameter-free head: the last
/// layer's outputs are split into `n_outputs` equal groups, each group is
/// averaged and [`Head`] squashes the means into `support`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<MatrixLayer>,
    pub n_outputs: usize,
    pub support: (f64, f64),
    pub head: Head,
}

/// Activations cached by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `f_l`, the input of every layer.
    pub inputs: Vec<DVector<f64>>,
    /// Output of the last layer.
    pub output: DVector<f64>,
    /// Group means fed to the squashing head.
    pub head: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Mean loss and per-layer gradients over a set of blocks.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub per_layer: Vec<DMatrix<f64>>,
}

impl Network {
    /// `dims[l] = (input width, output width)` of layer `l`. Hidden layers
    /// use tanh, the last layer is linear.
    pub fn new(dims: &[(usize, usize)], n_outputs: usize, support: (f64, f64), seed: u64) -> Result<Self> {
        ensure(!dims.is_empty(), || "network needs at least one layer".into())?;
        ensure(n_outputs >= 1, || "network needs at least one output".into())?;
        ensure(support.0 < support.1, || format!("support {support:?} is empty"))?;
        for (l, w) in dims.windows(2).enumerate() {
            ensure(w[0].1 == w[1].0, || {
                format!("layer {l} outputs {} but layer {} expects {}", w[0].1, l + 1, w[1].0)
            })?;
        }
        let last = dims[dims.len() - 1].1;
        ensure(last.is_multiple_of(n_outputs), || {
            format!("last layer width {last} is not a multiple of {n_outputs} outputs")
        })?;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &(d, m))| {
                ensure(d >= 1 && m >= 1, || format!("layer {l} has a zero dimension"))?;
                let gain = 1.0 / (d as f64).sqrt();
                let w = DMatrix::from_fn(m, d, |i, j| {
                    counter_normal(seed, tag::INIT, ((l as u64) << 32) | i as u64, j as u64) * gain
                });
                let activation = if l + 1 == dims.len() { Activation::Identity } else { Activation::Tanh };
                Ok(MatrixLayer { w, activation, layer_index: l })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, n_outputs, support, head: Head::default() })
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(m_l, d_l)` for every layer.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.w.shape()).collect()
    }

    /// `sum_l m_l d_l`.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len()).sum()
    }

    fn center_half(&self) -> (f64, f64) {
        ((self.support.0 + self.support.1) / 2.0, (self.support.1 - self.support.0) / 2.0)
    }

    pub fn forward(&self, features: &[f64]) -> Result<ForwardPass> {
        ensure(features.len() == self.input_width(), || {
            format!("expected {} features, got {}", self.input_width(), features.len())
        })?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = DVector::from_column_slice(features);
        for layer in &self.layers {
            let out = (&layer.w * &x).map(|v| layer.activation.apply(v));
            inputs.push(x);
            x = out;
        }
        let group = x.len() / self.n_outputs;
        let head: Vec<f64> = (0..self.n_outputs).map(|u| x.rows(u * group, group).sum() / group as f64).collect();
        let theta = match self.head {
            Head::Tanh => {
                let (c, h) = self.center_half();
                head.iter().map(|z| c + h * z.tanh()).collect()
            }
            Head::Ordered => {
                let (lo, hi) = self.support;
                let mut prev = lo;
                head.iter()
                    .map(|&z| {
                        prev += (hi - prev) * sigmoid(z);
                        prev
                    })
                    .collect()
            }
        };
        Ok(ForwardPass { inputs, output: x, head, theta })
    }

    pub fn estimate(&self, y: &nalgebra::DMatrix<num_complex::Complex64>) -> Result<Vec<f64>> {
        Ok(self.forward(&covariance_features(y, self.input_width()))?.theta)
    }

    /// Backpropagates `dL/dtheta` through the cached pass.
    pub fn backward_from_theta(&self, pass: &ForwardPass, d_theta: &[f64]) -> Vec<DMatrix<f64>> {
        let d_head: Vec<f64> = match self.head {
            Head::Tanh => {
                let (_, h) = self.center_half();
                pass.head.iter().zip(d_theta).map(|(z, g)| g * h * (1.0 - z.tanh().powi(2))).collect()
            }
            Head::Ordered => {
                let (lo, hi) = self.support;
                let mut d = vec![0.0; self.n_outputs];
                let mut carry = 0.0;
                for u in (0..self.n_outputs).rev() {
                    let g = d_theta[u] + carry;
                    let prev = if u == 0 { lo } else { pass.theta[u - 1] };
                    let s = sigmoid(pass.head[u]);
                    d[u] = g * (hi - prev) * s * (1.0 - s);
                    carry = g * (1.0 - s);
                }
                d
            }
        };
        let group = pass.output.len() / self.n_outputs;
        let mut d_out = DVector::from_fn(pass.output.len(), |i, _| d_head[i / group] / group as f64);
        let mut out_vals = pass.output.clone();
        let mut grads = vec![DMatrix::zeros(0, 0); self.layers.len()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let delta = d_out.zip_map(&out_vals, |g, o| g * layer.activation.slope(o));
            grads[l] = &delta * pass.inputs[l].transpose();
            if l > 0 {
                d_out = layer.w.transpose() * &delta;
                out_vals = pass.inputs[l].clone();
            }
        }
        grads
    }

    /// Mean reconstruction loss over `batches` and its gradient with respect
    /// to every layer's weight.
    pub fn backward(&self, batches: &[SignalBatch], gamma: f64) -> Result<Gradients> {
        ensure(!batches.is_empty(), || "backward needs at least one block".into())?;
        let mut per_layer: Vec<DMatrix<f64>> =
            self.layers.iter().map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols())).collect();
        let mut loss = 0.0;
        for b in batches {
            let pass = self.forward(&covariance_features(&b.y, self.input_width()))?;
            let (l, d_theta) = loss_and_gradient(&b.y, &pass.theta, gamma, 0.5)?;
            loss += l;
            for (acc, g) in per_layer.iter_mut().zip(self.backward_from_theta(&pass, &d_theta)) {
                *acc += g;
            }
        }
        let n = batches.len() as f64;
        per_layer.iter_mut().for_each(|g| *g /= n);
        Ok(Gradients { loss: loss / n, per_layer })
    }

    pub fn loss(&self, batches: &[SignalBatch], gamma: f64) -> Result<f64> {
        let mut total = 0.0;
        for b in batches {
            let theta = self.estimate(&b.y)?;
            total += crate::aoa::unsupervised_loss(&b.y, &theta, gamma)?;
        }
        Ok(total / batches.len().max(1) as f64)
    }

    /// Versioned little-endian checkpoint: magic `CCFN`, version, layer
    /// count, output count, support bounds, head, per-layer `(m, d, activation)`,
    /// then every weight row-major as `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        w.write_all(&(self.n_outputs as u32).to_le_bytes())?;
        w.write_all(&self.support.0.to_le_bytes())?;
        w.write_all(&self.support.1.to_le_bytes())?;
        w.write_all(&[self.head.code()])?;
        for layer in &self.layers {
            w.write_all(&(layer.w.nrows() as u32).to_le_bytes())?;
            w.write_all(&(layer.w.ncols() as u32).to_le_bytes())?;
            w.write_all(&[layer.activation.code()])?;
        }
        for layer in &self.layers {
            for i in 0..layer.w.nrows() {
                for j in 0..layer.w.ncols() {
                    w.write_all(&layer.w[(i, j)].to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader { buf: &bytes };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a network checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n_layers = r.u32()? as usize;
        let n_outputs = r.u32()? as usize;
        let support = (r.f64()?, r.f64()?);
        let head = Head::from_code(r.take(1)?[0])?;
        let mut specs = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            specs.push((r.u32()? as usize, r.u32()? as usize, Activation::from_code(r.take(1)?[0])?));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (l, (m, d, activation)) in specs.into_iter().enumerate() {
            let mut w = DMatrix::zeros(m, d);
            for i in 0..m {
                for j in 0..d {
                    w[(i, j)] = r.f64()?;
                }
            }
            layers.push(MatrixLayer { w, activation, layer_index: l });
        }
        if !r.buf.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { layers, n_outputs, support, head })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CCFN";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    buf: &'a [u8],
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let (h, t) = self.buf.split_at(n);
        self.buf = t;
        Ok(h)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aoa::{draw_thetas, synthesize_batch, ChannelConfig, GLOBAL_SUPPORT};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> Network {
        Network::new(&[(15, 8), (8, 6), (6, 4)], 2, GLOBAL_SUPPORT, seed).unwrap()
    }

    fn blocks(seed: u64, n: usize) -> Vec<SignalBatch> {
        let cfg = ChannelConfig { n_antennas: 8, ..Default::default() };
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let th = draw_thetas(&mut r, 2, GLOBAL_SUPPORT);
                synthesize_batch(&cfg, &mut r, &th, 12).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_support_center() {
        let mut net = small_net(1).with_head(Head::Tanh);
        for l in &mut net.layers {
            l.w.fill(0.0);
            l.activation = Activation::Identity;
        }
        let out = net.forward(&[0.3; 15]).unwrap();
        assert!(out.theta.iter().all(|&t| t.abs() < 1e-15));
    }

    #[test]
    fn single_identity_layer() {
        let mut net = Network::new(&[(3, 2)], 2, (-1.0, 1.0), 4).unwrap().with_head(Head::Tanh);
        net.layers[0].activation = Activation::Identity;
        let f = [0.5, -0.25, 1.0];
        let out = net.forward(&f).unwrap();
        let z = &net.layers[0].w * DVector::from_column_slice(&f);
        for u in 0..2 {
            assert!((out.theta[u] - z[u].tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn ordered_head_sorts_and_splits_the_support() {
        let mut net = Network::new(&[(4, 3)], 3, (0.0, 8.0), 0).unwrap().with_head(Head::Ordered);
        net.layers[0].w.fill(0.0);
        let out = net.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(out.theta, vec![4.0, 6.0, 7.0]);
        let net = small_net(11).with_head(Head::Ordered);
        for i in 0..20 {
            let f: Vec<f64> = (0..15).map(|j| ((i * 15 + j) as f64).sin() * 4.0).collect();
            let t = net.forward(&f).unwrap().theta;
            assert!(t[0] <= t[1] && t[0] > GLOBAL_SUPPORT.0 && t[1] < GLOBAL_SUPPORT.1);
        }
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let net = small_net(2);
        let f: Vec<f64> = (0..15).map(|i| (i as f64 * 1.7).sin() * 5.0).collect();
        let a = net.forward(&f).unwrap().theta;
        let b = net.forward(&f).unwrap().theta;
        assert_eq!(a, b);
        assert!(a.iter().all(|t| *t > GLOBAL_SUPPORT.0 && *t < GLOBAL_SUPPORT.1));
        assert!(net.forward(&f[..10]).is_err());
    }

    #[test]
    fn construction_validates_wiring() {
        assert!(Network::new(&[(4, 3), (2, 2)], 1, (-1.0, 1.0), 0).is_err());
        assert!(Network::new(&[(4, 3)], 2, (-1.0, 1.0), 0).is_err());
        assert!(Network::new(&[], 1, (-1.0, 1.0), 0).is_err());
        assert_eq!(small_net(0).param_count(), 15 * 8 + 8 * 6 + 6 * 4);
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..4 {
            let head = if seed % 2 == 0 { Head::Ordered } else { Head::Tanh };
            let net = small_net(seed).with_head(head);
            let data = blocks(seed + 100, 3);
            let g = net.backward(&data, 1e-2).unwrap();
            for l in 0..net.n_layers() {
                let (m, d) = net.layers[l].w.shape();
                let mut num = DMatrix::zeros(m, d);
                for i in 0..m {
                    for j in 0..d {
                        let mut p = net.clone();
                        let mut q = net.clone();
                        p.layers[l].w[(i, j)] += 1e-5;
                        q.layers[l].w[(i, j)] -= 1e-5;
                        num[(i, j)] = (p.loss(&data, 1e-2).unwrap() - q.loss(&data, 1e-2).unwrap()) / 2e-5;
                    }
                }
                let rel = (&g.per_layer[l] - &num).norm() / num.norm().max(1e-12);
                assert!(rel < 1e-4, "seed {seed} layer {l}: rel {rel}");
            }
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let net = small_net(7);
        let data = blocks(8, 4);
        let full = net.backward(&data, 1e-2).unwrap();
        let singles: Vec<_> = data.iter().map(|b| net.backward(std::slice::from_ref(b), 1e-2).unwrap()).collect();
        for l in 0..net.n_layers() {
            let mean = singles
                .iter()
                .fold(DMatrix::zeros(full.per_layer[l].nrows(), full.per_layer[l].ncols()), |a, g| a + &g.per_layer[l])
                / 4.0;
            assert!((&full.per_layer[l] - mean).abs().max() <= 1e-10);
        }
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        // A noiseless single-source block whose LoS angle equals the
        // network's own estimate, with vanishing regularization.
        let mut net = Network::new(&[(15, 4), (4, 2)], 1, GLOBAL_SUPPORT, 3).unwrap();
        for l in &mut net.layers {
            l.w.fill(0.0);
        }
        let cfg = ChannelConfig {
            n_antennas: 8,
            n_paths: 1,
            rician_rho: (1e6, 1e6),
            snr_db: (f64::INFINITY, f64::INFINITY),
            ..Default::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let b = synthesize_batch(&cfg, &mut r, &[0.0], 10).unwrap();
        let g = net.backward(&[b], 1e-12).unwrap();
        assert!(g.loss < 1e-8);
        for gl in &g.per_layer {
            assert!(gl.abs().max() <= 1e-8, "{}", gl.abs().max());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = small_net(9);
        net.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CCFN");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 16 + 1 + 3 * 9 + 8 * net.param_count());
        assert_eq!(Network::load(&path).unwrap(), net);
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(Network::load(&path).is_err());
    }
}
