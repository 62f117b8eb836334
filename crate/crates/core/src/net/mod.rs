//! The multi-channel U-Net mask estimator.
//!
//! Layout for `filters = [f0, .., fD]` (depth `D`):
//!
//! * encoder level `i < D`: 4x4 stride-2 conv to `f_i`, leaky-ReLU(0.2),
//!   dropout (training only);
//! * transition: two 3x3 stride-1 convs to `f_D`, each with leaky-ReLU;
//! * decoder level `l = D-1 .. 0`: concatenate the encoder activation of
//!   level `l`, 4x4 stride-2 transposed conv to `f_{l-1}` (`f_0` at the top),
//!   ReLU;
//! * head: 1x1 conv to K channels, sigmoid scaled by the mask ceiling.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, OptimizerState, RngState,
};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Element, Gradients, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Error, Debug)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input spatial size {height}x{width} is not divisible by 2^{depth}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        depth: usize,
    },
    #[error("input shape {actual:?} does not match [batch, {channels}, H, W]")]
    InputShape { actual: Vec<usize>, channels: usize },
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Version(String),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint config incompatible: {0}")]
    Incompatible(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Channel widths per level; the last entry is the transition width.
    pub filters: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout_rate: f64,
    pub mask_ceiling: f64,
    /// Mask value the head bias is set to produce at initialization. Half
    /// the ceiling means a zero bias.
    #[serde(default = "unit_mask")]
    pub initial_mask: f64,
    pub seed: u64,
}

fn unit_mask() -> f64 {
    1.0
}

impl NetworkConfig {
    pub const TOY_FILTERS: [usize; 7] = [4, 8, 16, 24, 32, 48, 64];
    pub const FULL_FILTERS: [usize; 7] = [32, 64, 128, 256, 512, 1024, 2048];

    /// Desk-scale default.
    pub fn toy(out_channels: usize) -> Self {
        Self {
            filters: Self::TOY_FILTERS.to_vec(),
            in_channels: 1,
            out_channels,
            dropout_rate: 0.1,
            mask_ceiling: 10.0,
            initial_mask: unit_mask(),
            seed: 0,
        }
    }

    /// Full-width preset (~99M parameters).
    pub fn full(out_channels: usize) -> Self {
        Self {
            filters: Self::FULL_FILTERS.to_vec(),
            ..Self::toy(out_channels)
        }
    }

    pub fn depth(&self) -> usize {
        self.filters.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.len() < 2 {
            return Err(NetError::Config("need at least two filter widths".into()));
        }
        if self.filters.contains(&0) || self.in_channels == 0 {
            return Err(NetError::Config("channel counts must be positive".into()));
        }
        if self.out_channels == 0 {
            return Err(NetError::Config("out_channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NetError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.mask_ceiling > 0.0 && self.mask_ceiling.is_finite()) {
            return Err(NetError::Config("mask_ceiling must be positive".into()));
        }
        if !(self.initial_mask > 0.0 && self.initial_mask < self.mask_ceiling) {
            return Err(NetError::Config(format!(
                "initial_mask {} outside (0, {})",
                self.initial_mask, self.mask_ceiling
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let f = &self.filters;
        let depth = self.depth();
        let mut layout = Vec::new();
        let mut conv = |name: String, weight: Vec<usize>, bias: usize| {
            layout.push((format!("{name}.weight"), weight));
            layout.push((format!("{name}.bias"), vec![bias]));
        };
        for i in 0..depth {
            let cin = if i == 0 { self.in_channels } else { f[i - 1] };
            conv(format!("enc{i}"), vec![f[i], cin, 4, 4], f[i]);
        }
        conv("trans0".into(), vec![f[depth], f[depth - 1], 3, 3], f[depth]);
        conv("trans1".into(), vec![f[depth], f[depth], 3, 3], f[depth]);
        for l in (0..depth).rev() {
            let (cin, cout) = self.decoder_channels(l);
            conv(format!("dec{l}"), vec![cin, cout, 4, 4], cout);
        }
        conv("head".into(), vec![self.out_channels, f[0], 1, 1], self.out_channels);
        layout
    }

    fn decoder_channels(&self, level: usize) -> (usize, usize) {
        let f = &self.filters;
        let depth = self.depth();
        let below = if level + 1 == depth { f[depth] } else { f[level] };
        let out = if level == 0 { f[0] } else { f[level - 1] };
        (below + f[level], out)
    }

    /// Total parameter count, without allocating the network.
    pub fn parameter_count(&self) -> usize {
        self.parameter_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Var,
    pub params: Vec<Var>,
}

#[derive(Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Vec<Parameter<T>>,
    forward_calls: AtomicU64,
    samples_forwarded: AtomicU64,
}

impl<T: Element> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            forward_calls: AtomicU64::new(self.forward_calls()),
            samples_forwarded: AtomicU64::new(self.samples_forwarded()),
        }
    }
}

/// Build a freshly initialized network.
pub fn build_network<T: Element>(config: NetworkConfig) -> Result<Network<T>> {
    Network::new(config)
}

impl<T: Element> Network<T> {
    /// Kaiming-uniform weights seeded by `config.seed`. Biases are zero except
    /// the head's, which starts every mask at `config.initial_mask`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let p = config.initial_mask / config.mask_ceiling;
        let head_bias = (p / (1.0 - p)).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let leaky_gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name == "head.bias" {
                    vec![T::from_f64(head_bias); n]
                } else if name.ends_with(".bias") {
                    vec![T::zero(); n]
                } else {
                    let (fan_in, gain) = if name.starts_with("dec") {
                        // stride-2 transposed conv: each output sees k*k/4 taps per input channel
                        (shape[0] * shape[2] * shape[3] / 4, 2f64.sqrt())
                    } else if name.starts_with("head") {
                        (shape[1], 1.0)
                    } else {
                        (shape[1] * shape[2] * shape[3], leaky_gain)
                    };
                    let bound = gain * (3.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                        .collect()
                };
                Parameter {
                    name,
                    value: Tensor::new(shape, data),
                    grad: None,
                }
            })
            .collect();
        Ok(Self {
            config,
            params,
            forward_calls: AtomicU64::new(0),
            samples_forwarded: AtomicU64::new(0),
        })
    }

    pub(crate) fn from_parts(config: NetworkConfig, params: Vec<Parameter<T>>) -> Self {
        Self {
            config,
            params,
            forward_calls: AtomicU64::new(0),
            samples_forwarded: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of forward passes run so far.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Number of samples (batch items) pushed through forward so far.
    pub fn samples_forwarded(&self) -> u64 {
        self.samples_forwarded.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
        self.samples_forwarded.store(0, Ordering::Relaxed);
    }

    /// Check an input shape against the config and the depth constraint.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[0] == 0 {
            return Err(NetError::InputShape {
                actual: shape.to_vec(),
                channels: self.config.in_channels,
            });
        }
        let step = 1usize << self.config.depth();
        if shape[2] % step != 0 || shape[3] % step != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(NetError::IndivisibleInput {
                height: shape[2],
                width: shape[3],
                depth: self.config.depth(),
            });
        }
        Ok(())
    }

    /// Record the network on `tape`. Dropout is active only when a random
    /// source is supplied; parameters are differentiable only in that case
    /// or when `track_grads` is set.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
        track_grads: bool,
    ) -> Result<ForwardPass> {
        let shape = tape.value(input).shape().to_vec();
        self.check_input(&shape)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        self.samples_forwarded
            .fetch_add(shape[0] as u64, Ordering::Relaxed);

        let train = dropout_rng.is_some();
        let grads = train || track_grads;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), grads))
            .collect();
        let mut next = params.iter().copied();
        let mut take = || (next.next().unwrap(), next.next().unwrap());

        let slope = T::from_f64(LEAKY_SLOPE);
        let rate = self.config.dropout_rate;
        let mut rng = dropout_rng;
        let depth = self.config.depth();
        let mut skips = Vec::with_capacity(depth);
        let mut x = input;
        for _ in 0..depth {
            let (w, b) = take();
            x = tape.conv2d(x, w, b, 2, 1)?;
            x = tape.leaky_relu(x, slope);
            if let Some(rng) = rng.as_deref_mut() {
                if rate > 0.0 {
                    x = dropout(tape, x, rate, rng)?;
                }
            }
            skips.push(x);
        }
        for _ in 0..2 {
            let (w, b) = take();
            x = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.leaky_relu(x, slope);
        }
        for skip in skips.into_iter().rev() {
            let (w, b) = take();
            x = tape.concat(x, skip)?;
            x = tape.conv_transpose2d(x, w, b, 2, 1)?;
            x = tape.relu(x);
        }
        let (w, b) = take();
        x = tape.conv2d(x, w, b, 1, 0)?;
        x = tape.sigmoid(x);
        let output = tape.scale(x, T::from_f64(self.config.mask_ceiling));
        Ok(ForwardPass { output, params })
    }

    /// Eval-mode forward on a private tape; returns [B, K, H, W] masks.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let pass = self.forward(&mut tape, x, None, false)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Add the gradients of a finished backward pass into the parameters.
    pub fn accumulate_grads(&mut self, grads: &mut Gradients<T>, pass: &ForwardPass) {
        for (p, &v) in self.params.iter_mut().zip(&pass.params) {
            if let Some(g) = grads.take(v) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g.data()),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Plain SGD: `p -= lr * grad`, then clear the gradients.
    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(NetError::MissingGrad(p.name.clone()));
        }
        let lr = T::from_f64(learning_rate);
        for p in &mut self.params {
            let g = p.grad.take().expect("checked above");
            for (v, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *v = *v - lr * d;
            }
        }
        Ok(())
    }

    /// SHA-256 over parameter names and values, for change detection.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).
fn dropout<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Var, AutodiffError> {
    let shape = tape.value(x).shape().to_vec();
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen_bool(rate) { T::zero() } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask));
    tape.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            filters: vec![2, 3, 4],
            ..NetworkConfig::toy(2)
        }
    }

    #[test]
    fn toy_shape_contract() {
        let net = Network::<f32>::new(NetworkConfig::toy(2)).unwrap();
        let out = net.predict(&Tensor::zeros(&[1, 1, 256, 256])).unwrap();
        assert_eq!(out.shape(), &[1, 2, 256, 256]);
    }

    #[test]
    fn zero_input_zero_bias_gives_half_ceiling() {
        let net = Network::<f32>::new(NetworkConfig {
            initial_mask: 5.0,
            ..NetworkConfig::toy(3)
        })
        .unwrap();
        assert!(net.parameter("head.bias").unwrap().value.data().iter().all(|&b| b == 0.0));
        let out = net.predict(&Tensor::zeros(&[1, 1, 64, 64])).unwrap();
        assert!(out.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn default_masks_start_at_one() {
        let net = Network::<f64>::new(NetworkConfig::toy(2)).unwrap();
        let out = net.predict(&Tensor::zeros(&[1, 1, 64, 64])).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::<f32>::new(NetworkConfig::toy(2)).unwrap();
        let b = Network::<f32>::new(NetworkConfig::toy(2)).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        let c = Network::<f32>::new(NetworkConfig { seed: 1, ..NetworkConfig::toy(2) }).unwrap();
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn parameter_counts() {
        let toy = NetworkConfig::toy(4);
        let net = Network::<f32>::new(toy.clone()).unwrap();
        assert_eq!(net.parameter_count(), toy.parameter_count());
        assert!(toy.parameter_count() < 500_000);
        let full = NetworkConfig::full(4).parameter_count() as f64;
        assert!((full / 124e6 - 1.0).abs() < 0.35, "{full}");
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let net = Network::<f32>::new(small()).unwrap();
        assert!(matches!(
            net.predict(&Tensor::zeros(&[1, 1, 6, 8])),
            Err(NetError::IndivisibleInput { .. })
        ));
        assert!(matches!(
            net.predict(&Tensor::zeros(&[1, 2, 8, 8])),
            Err(NetError::InputShape { .. })
        ));
    }

    #[test]
    fn outputs_bounded_and_eval_deterministic() {
        let net = Network::<f32>::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..2 * 16 * 16).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let x = Tensor::new(vec![2, 1, 16, 16], data);
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=10.0).contains(&v)));
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.dropout_rate = 1.0;
        assert!(Network::<f32>::new(c).is_err());
        let mut c = small();
        c.out_channels = 0;
        assert!(Network::<f32>::new(c).is_err());
        let mut c = small();
        c.filters = vec![4];
        assert!(Network::<f32>::new(c).is_err());
    }

    #[test]
    fn sgd_update_arithmetic() {
        let mut net = Network::<f64>::new(small()).unwrap();
        let before: Vec<f64> = net.parameters()[0].value.data().to_vec();
        for p in net.parameters_mut() {
            p.grad = Some(Tensor::full(p.value.shape(), 2.0));
        }
        net.sgd_step(0.01).unwrap();
        for (a, b) in net.parameters()[0].value.data().iter().zip(&before) {
            assert!((a - (b - 0.02)).abs() < 1e-15);
        }
        assert!(net.parameters().iter().all(|p| p.grad.is_none()));
        assert!(matches!(net.sgd_step(0.01), Err(NetError::MissingGrad(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut net = Network::<f32>::new(small()).unwrap();
        let digest = net.digest();
        for p in net.parameters_mut() {
            p.grad = Some(Tensor::full(p.value.shape(), 3.0));
        }
        net.sgd_step(0.0).unwrap();
        assert_eq!(net.digest(), digest);
    }

    #[test]
    fn dropout_only_in_training() {
        let net = Network::<f32>::new(NetworkConfig { dropout_rate: 0.5, ..small() }).unwrap();
        let x = Tensor::full(&[1, 1, 8, 8], 1.0);
        let eval = net.predict(&x).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = net.forward(&mut tape, v, Some(&mut rng), false).unwrap();
        assert_ne!(tape.value(pass.output), &eval);
        assert_eq!(net.forward_calls(), 2);
        assert_eq!(net.samples_forwarded(), 2);
    }
}
