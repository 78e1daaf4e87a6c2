//! The 1-D CNN backbone and its companions.
//!
//! Inputs are laid out `(batch, bands, electrodes)`: frequency bands act as
//! convolution channels and electrodes form the spatial axis. The backbone is
//! two `conv1d → batch_norm → leaky_relu` blocks followed by a two-layer
//! classifier with dropout between the layers.

mod checkpoint;
mod decoder;
mod ema;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use decoder::{autoencoder_forward, BoundDecoder, DecoderParams};
pub use ema::EmaParams;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub spatial_len: usize,
    pub num_classes: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel_size: usize,
    pub padding: usize,
    pub hidden: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ArchConfig {
    pub fn new(in_channels: usize, spatial_len: usize, num_classes: usize) -> Self {
        ArchConfig {
            in_channels,
            spatial_len,
            num_classes,
            conv1_channels: 16,
            conv2_channels: 32,
            kernel_size: 3,
            padding: 1,
            hidden: 64,
            leaky_slope: 0.01,
            dropout: 0.5,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Receptive field of the two stacked conv blocks.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.kernel_size - 1)
    }

    fn block_out_len(&self, len: usize) -> usize {
        (len + 2 * self.padding + 1).saturating_sub(self.kernel_size)
    }

    /// Spatial length after both conv blocks.
    pub fn encoded_len(&self) -> usize {
        self.block_out_len(self.block_out_len(self.spatial_len))
    }

    pub fn validate(&self) -> Result<()> {
        let min = self.receptive_field();
        if self.spatial_len < min {
            return Err(Error::invalid(
                "init_backbone",
                format!(
                    "spatial_len {} is below the minimum {min}",
                    self.spatial_len
                ),
            ));
        }
        if self.in_channels == 0 || self.num_classes < 2 || self.kernel_size == 0 {
            return Err(Error::invalid("init_backbone", "degenerate architecture"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("init_backbone", "dropout outside [0, 1)"));
        }
        if self.encoded_len() == 0 {
            return Err(Error::invalid(
                "init_backbone",
                "kernel larger than padded input",
            ));
        }
        Ok(())
    }
}

/// Uniform(−a, a) with `a = sqrt(1/fan_in)`.
pub(crate) fn uniform_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let a = (1.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBatchNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    fn bind(&self, g: &mut Graph, track: bool) -> BoundBatchNorm {
        BoundBatchNorm {
            gamma: leaf(g, &self.gamma, track),
            beta: leaf(g, &self.beta, track),
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (`running ← (1 − m)·running + m·batch`).
    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundBatchNorm,
        x: Var,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm1d_train(x, bound.gamma, bound.beta, eps)?;
                for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
                for (r, b) in self
                    .running_var
                    .data_mut()
                    .iter_mut()
                    .zip(&stats.var_unbiased)
                {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
                Ok(y)
            }
            Mode::Eval => g.batch_norm1d_eval(
                x,
                bound.gamma,
                bound.beta,
                self.running_mean.data(),
                self.running_var.data(),
                eps,
            ),
        }
    }
}

/// A convolution (or transposed convolution) followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub bn: BatchNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub kernel: Var,
    pub bias: Var,
    pub bn: BoundBatchNorm,
}

impl ConvBlock {
    fn bind(&self, g: &mut Graph, track: bool) -> BoundConv {
        BoundConv {
            kernel: leaf(g, &self.kernel, track),
            bias: leaf(g, &self.bias, track),
            bn: self.bn.bind(g, track),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    fn init<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        Linear {
            weight: uniform_init(&[out, inp], inp, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn bind(&self, g: &mut Graph, track: bool) -> BoundLinear {
        BoundLinear {
            weight: leaf(g, &self.weight, track),
            bias: leaf(g, &self.bias, track),
        }
    }
}

fn linear_forward(g: &mut Graph, p: &BoundLinear, x: Var) -> Result<Var> {
    let wt = g.transpose(p.weight)?;
    let y = g.matmul(x, wt)?;
    g.add(y, p.bias)
}

fn leaf(g: &mut Graph, t: &Tensor, track: bool) -> Var {
    if track {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub arch: ArchConfig,
    pub block1: ConvBlock,
    pub block2: ConvBlock,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Graph handles for the trainable tensors of a [`BackboneParams`].
#[derive(Clone, Copy, Debug)]
pub struct BoundBackbone {
    pub block1: BoundConv,
    pub block2: BoundConv,
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
}

impl BoundBackbone {
    /// Handles in the same order as [`BackboneParams::trainable_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::with_capacity(12);
        for b in [&self.block1, &self.block2] {
            v.extend([b.kernel, b.bias, b.bn.gamma, b.bn.beta]);
        }
        for l in [&self.fc1, &self.fc2] {
            v.extend([l.weight, l.bias]);
        }
        v
    }
}

/// Initializes the backbone with the default layer widths.
pub fn init_backbone(
    seed: u64,
    in_channels: usize,
    spatial_len: usize,
    num_classes: usize,
) -> Result<BackboneParams> {
    BackboneParams::init(ArchConfig::new(in_channels, spatial_len, num_classes), seed)
}

impl BackboneParams {
    /// Weights ~ U(−a, a), `a = sqrt(1/fan_in)`; biases 0; BN γ = 1, β = 0.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let k = arch.kernel_size;
        let conv = |cin: usize, cout: usize, rng: &mut _| ConvBlock {
            kernel: uniform_init(&[cout, cin, k], cin * k, rng),
            bias: Tensor::zeros(&[cout]),
            bn: BatchNorm::new(cout),
        };
        let block1 = conv(arch.in_channels, arch.conv1_channels, &mut rng);
        let block2 = conv(arch.conv1_channels, arch.conv2_channels, &mut rng);
        let flat = arch.conv2_channels * arch.encoded_len();
        let fc1 = Linear::init(arch.hidden, flat, &mut rng);
        let fc2 = Linear::init(arch.num_classes, arch.hidden, &mut rng);
        Ok(BackboneParams {
            arch,
            block1,
            block2,
            fc1,
            fc2,
        })
    }

    /// Registers the trainable tensors as tracked leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundBackbone {
        self.bind_with(g, true)
    }

    /// Registers the trainable tensors as constants (teacher / target paths).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundBackbone {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, track: bool) -> BoundBackbone {
        BoundBackbone {
            block1: self.block1.bind(g, track),
            block2: self.block2.bind(g, track),
            fc1: self.fc1.bind(g, track),
            fc2: self.fc2.bind(g, track),
        }
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut v = Vec::with_capacity(12);
        for b in [&self.block1, &self.block2] {
            v.extend([&b.kernel, &b.bias, &b.bn.gamma, &b.bn.beta]);
        }
        for l in [&self.fc1, &self.fc2] {
            v.extend([&l.weight, &l.bias]);
        }
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::with_capacity(12);
        for b in [&mut self.block1, &mut self.block2] {
            v.push(&mut b.kernel);
            v.push(&mut b.bias);
            v.push(&mut b.bn.gamma);
            v.push(&mut b.bn.beta);
        }
        for l in [&mut self.fc1, &mut self.fc2] {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }

    /// Every tensor, trainable or not, keyed by a stable dotted name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, b) in [("block1", &self.block1), ("block2", &self.block2)] {
            out.push((format!("{name}.kernel"), &b.kernel));
            out.push((format!("{name}.bias"), &b.bias));
            out.push((format!("{name}.bn.gamma"), &b.bn.gamma));
            out.push((format!("{name}.bn.beta"), &b.bn.beta));
            out.push((format!("{name}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("{name}.bn.running_var"), &b.bn.running_var));
        }
        for (name, l) in [("fc1", &self.fc1), ("fc2", &self.fc2)] {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        out
    }

    /// Rebuilds parameters from named tensors; the architecture is read back
    /// from the tensor shapes.
    pub fn from_named(named: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Data(format!("checkpoint is missing `{name}`")))
        };
        let block = |name: &str| -> Result<ConvBlock> {
            Ok(ConvBlock {
                kernel: get(&format!("{name}.kernel"))?,
                bias: get(&format!("{name}.bias"))?,
                bn: BatchNorm {
                    gamma: get(&format!("{name}.bn.gamma"))?,
                    beta: get(&format!("{name}.bn.beta"))?,
                    running_mean: get(&format!("{name}.bn.running_mean"))?,
                    running_var: get(&format!("{name}.bn.running_var"))?,
                },
            })
        };
        let block1 = block("block1")?;
        let block2 = block("block2")?;
        let fc1 = Linear {
            weight: get("fc1.weight")?,
            bias: get("fc1.bias")?,
        };
        let fc2 = Linear {
            weight: get("fc2.weight")?,
            bias: get("fc2.bias")?,
        };
        let k1 = block1.kernel.shape();
        let k2 = block2.kernel.shape();
        if k1.len() != 3 || k2.len() != 3 || fc1.weight.rank() != 2 || fc2.weight.rank() != 2 {
            return Err(Error::Data(
                "checkpoint tensors have unexpected rank".into(),
            ));
        }
        let mut arch = ArchConfig::new(k1[1], 0, fc2.weight.shape()[0]);
        arch.conv1_channels = k1[0];
        arch.conv2_channels = k2[0];
        arch.kernel_size = k1[2];
        arch.hidden = fc1.weight.shape()[0];
        // With same-padding the flattened width is conv2_channels · spatial_len.
        arch.spatial_len = fc1.weight.shape()[1] / arch.conv2_channels.max(1);
        let params = BackboneParams {
            arch,
            block1,
            block2,
            fc1,
            fc2,
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let fresh = BackboneParams::init(self.arch.clone(), 0)?;
        for ((name, a), (_, b)) in self.named_tensors().iter().zip(fresh.named_tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Data(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.arch.in_channels || s[2] != self.arch.spatial_len {
            return Err(Error::shape(
                "backbone_forward",
                s,
                &[0, self.arch.in_channels, self.arch.spatial_len],
            ));
        }
        Ok(())
    }

    /// The two convolutional blocks; output `(B, conv2_channels, encoded_len)`.
    pub fn encode(
        &mut self,
        g: &mut Graph,
        bound: &BoundBackbone,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        self.check_input(g, x)?;
        let a = &self.arch;
        let (pad, slope, mom, eps) = (a.padding, a.leaky_slope, a.bn_momentum, a.bn_eps);
        let mut h = x;
        for (block, b) in [
            (&mut self.block1, &bound.block1),
            (&mut self.block2, &bound.block2),
        ] {
            h = g.conv1d(h, b.kernel, Some(b.bias), pad)?;
            h = block.bn.forward(g, &b.bn, h, mode, mom, eps)?;
            h = g.leaky_relu(h, slope);
        }
        Ok(h)
    }

    /// Classifier head on encoded features: flatten → fc1 → leaky_relu →
    /// dropout (train only) → fc2.
    pub fn classify<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bound: &BoundBackbone,
        encoded: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let b = g.shape(encoded)[0];
        let flat = g.reshape(
            encoded,
            &[b, self.arch.conv2_channels * self.arch.encoded_len()],
        )?;
        let h = linear_forward(g, &bound.fc1, flat)?;
        let h = g.leaky_relu(h, self.arch.leaky_slope);
        let h = g.dropout(h, self.arch.dropout, mode == Mode::Train, rng)?;
        linear_forward(g, &bound.fc2, h)
    }

    /// Raw logits `(B, num_classes)`. Train mode updates BN running stats.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        bound: &BoundBackbone,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.encode(g, bound, x, mode)?;
        self.classify(g, bound, h, mode, rng)
    }

    /// Eval-mode logits for a plain input tensor, with no gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut params = self.clone();
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        // Eval mode never draws from the rng.
        let mut rng = rng::stream(0, Stream::Dropout);
        let y = params.forward(&mut g, &bound, xv, Mode::Eval, &mut rng)?;
        Ok(g.value(y).clone())
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Collects gradients for `vars` in order, zero-filling tensors the loss did
/// not reach.
pub fn collect_grads(grads: &Gradients, vars: &[Var], params: &[&Tensor]) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(params)
        .map(|(v, t)| grads.get_or_zeros(*v, t.len()))
        .collect()
}
