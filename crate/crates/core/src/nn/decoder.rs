//! Transposed-convolution decoder for the convolutional autoencoder baseline.
//! It mirrors the encoder: `conv2 → conv1 → input` channels, each block a
//! transposed conv followed by batch norm and ReLU.

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Graph, Tensor, Var};

use super::{
    uniform_init, ArchConfig, BackboneParams, BatchNorm, BoundBackbone, BoundConv, ConvBlock, Mode,
};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub arch: ArchConfig,
    /// Kernel layout `(in, out, k)`.
    pub block1: ConvBlock,
    pub block2: ConvBlock,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDecoder {
    pub block1: BoundConv,
    pub block2: BoundConv,
}

impl BoundDecoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::with_capacity(8);
        for b in [&self.block1, &self.block2] {
            v.extend([b.kernel, b.bias, b.bn.gamma, b.bn.beta]);
        }
        v
    }
}

impl DecoderParams {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed ^ 0xdec0_de00, Stream::Init);
        let k = arch.kernel_size;
        let block = |cin: usize, cout: usize, rng: &mut _| ConvBlock {
            kernel: uniform_init(&[cin, cout, k], cin * k, rng),
            bias: Tensor::zeros(&[cout]),
            bn: BatchNorm::new(cout),
        };
        let block1 = block(arch.conv2_channels, arch.conv1_channels, &mut rng);
        let block2 = block(arch.conv1_channels, arch.in_channels, &mut rng);
        Ok(DecoderParams {
            arch: arch.clone(),
            block1,
            block2,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundDecoder {
        BoundDecoder {
            block1: self.block1.bind(g, true),
            block2: self.block2.bind(g, true),
        }
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut v = Vec::with_capacity(8);
        for b in [&self.block1, &self.block2] {
            v.extend([&b.kernel, &b.bias, &b.bn.gamma, &b.bn.beta]);
        }
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::with_capacity(8);
        for b in [&mut self.block1, &mut self.block2] {
            v.push(&mut b.kernel);
            v.push(&mut b.bias);
            v.push(&mut b.bn.gamma);
            v.push(&mut b.bn.beta);
        }
        v
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundDecoder,
        z: Var,
        mode: Mode,
    ) -> Result<Var> {
        let a = &self.arch;
        let (pad, mom, eps) = (a.padding, a.bn_momentum, a.bn_eps);
        let mut h = z;
        for (block, b) in [
            (&mut self.block1, &bound.block1),
            (&mut self.block2, &bound.block2),
        ] {
            h = g.conv_transpose1d(h, b.kernel, Some(b.bias), pad)?;
            h = block.bn.forward(g, &b.bn, h, mode, mom, eps)?;
            h = g.relu(h);
        }
        Ok(h)
    }
}

/// Encoder conv blocks followed by the decoder; the reconstruction has the
/// input's shape.
pub fn autoencoder_forward(
    g: &mut Graph,
    enc: &mut BackboneParams,
    enc_bound: &BoundBackbone,
    dec: &mut DecoderParams,
    dec_bound: &BoundDecoder,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let z = enc.encode(g, enc_bound, x, mode)?;
    let y = dec.forward(g, dec_bound, z, mode)?;
    if g.shape(y) != g.shape(x) {
        return Err(Error::shape("autoencoder_forward", g.shape(x), g.shape(y)));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_backbone;

    #[test]
    fn reconstruction_matches_input_shape() {
        let mut enc = init_backbone(0, 5, 62, 3).unwrap();
        let mut dec = DecoderParams::init(&enc.arch, 0).unwrap();
        let mut g = Graph::new();
        let eb = enc.bind(&mut g);
        let db = dec.bind(&mut g);
        let x = g.constant(Tensor::full(&[8, 5, 62], 0.5));
        let y = autoencoder_forward(&mut g, &mut enc, &eb, &mut dec, &db, x, Mode::Train).unwrap();
        assert_eq!(g.shape(y), &[8, 5, 62]);
    }

    #[test]
    fn zero_decoder_gives_constant_channels() {
        let mut enc = init_backbone(1, 5, 16, 3).unwrap();
        let mut dec = DecoderParams::init(&enc.arch, 1).unwrap();
        for t in dec.trainable_mut() {
            t.data_mut().fill(0.0);
        }
        // γ = 0 above; give the last BN a visible offset per channel.
        dec.block2.bn.beta = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let mut g = Graph::new();
        let eb = enc.bind(&mut g);
        let db = dec.bind(&mut g);
        let mut rng = rng::stream(3, Stream::Augment);
        let data: Vec<f64> = (0..4 * 5 * 16)
            .map(|_| rand::Rng::random::<f64>(&mut rng))
            .collect();
        let x = g.constant(Tensor::new(vec![4, 5, 16], data).unwrap());
        let y = autoencoder_forward(&mut g, &mut enc, &eb, &mut dec, &db, x, Mode::Train).unwrap();
        let out = g.value(y).data();
        for b in 0..4 {
            for c in 0..5 {
                let row = &out[(b * 5 + c) * 16..(b * 5 + c + 1) * 16];
                assert!(row.iter().all(
                    |&v| v == 0.1 * (c + 1) as f64 || (v - 0.1 * (c + 1) as f64).abs() < 1e-15
                ));
            }
        }
    }
}
