//! Encoder and posterior networks.
//!
//! The encoder is a top 3x3 convolution followed by three dense blocks with
//! two 2x2 max-pool down-samplings between them. Each block ends in a 1x1
//! transition convolution that fixes its output width, giving features at
//! full, half and quarter resolution. A 1x1 bottleneck with a sigmoid maps
//! the quarter-resolution features to the supervised attention channels.
//!
//! Two posterior networks consume those features: an up-sampling
//! segmentation decoder and a coordinate-regression head.

use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channels added by each dense layer.
    pub growth_rate: usize,
    /// Channels of the supervised bottleneck output.
    pub bottleneck_channels: usize,
    /// Feature widths at full, half and quarter resolution.
    pub level_channels: [usize; 3],
    pub layers_per_block: usize,
    pub input_channels: usize,
    /// Hidden width of the localization head.
    pub head_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            growth_rate: 8,
            bottleneck_channels: 4,
            level_channels: [16, 32, 64],
            layers_per_block: 4,
            input_channels: 1,
            head_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.growth_rate == 0 {
            return bad("growth_rate must be >= 1");
        }
        if self.bottleneck_channels == 0 {
            return bad("bottleneck_channels must be >= 1");
        }
        if self.layers_per_block == 0 {
            return bad("layers_per_block must be >= 1");
        }
        if self.input_channels == 0 || self.head_channels == 0 {
            return bad("input_channels and head_channels must be >= 1");
        }
        let [a, b, c] = self.level_channels;
        if !(0 < a && a < b && b < c) {
            return bad("level_channels must be positive and strictly increasing");
        }
        Ok(())
    }

    /// Closed-form scalar parameter count of the encoder.
    pub fn encoder_param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let (k, l) = (self.growth_rate, self.layers_per_block);
        let block = |cin: usize| (0..l).map(|i| conv(cin + i * k, k, 3)).sum::<usize>();
        let [c0, c1, c2] = self.level_channels;
        conv(self.input_channels, c0, 3)
            + block(c0)
            + conv(c0 + l * k, c0, 1)
            + block(c0)
            + conv(c0 + l * k, c1, 1)
            + block(c1)
            + conv(c1 + l * k, c2, 1)
            + conv(c2, self.bottleneck_channels, 1)
    }
}

/// A convolution's parameters inside a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, bound.node(self.weight), bound.node(self.bias), self.padding)
    }
}

/// Deterministic parameter factory: Kaiming-uniform weights, zero biases.
struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: Xoshiro256PlusPlus,
}

impl<T: Scalar> Init<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = cout * cin * k * k;
        let data: Vec<T> = (0..n).map(|_| T::of(self.rng.random_range(-bound..bound))).collect();
        let weight = self.store.add(
            format!("{name}.weight"),
            Tensor::new(&[cout, cin, k, k], data).expect("conv weight shape"),
        );
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv {
            weight,
            bias,
            padding: (k - 1) / 2,
        }
    }
}

#[derive(Clone, Debug)]
struct DenseBlock {
    layers: Vec<Conv>,
}

impl DenseBlock {
    fn build<T: Scalar>(init: &mut Init<T>, name: &str, cin: usize, cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.layers_per_block)
            .map(|l| init.conv(&format!("{name}.layer{l}"), cin + l * cfg.growth_rate, cfg.growth_rate, 3))
            .collect();
        Self { layers }
    }

    /// Each layer sees the channel concatenation of the block input and all
    /// earlier layer outputs; the block returns that full concatenation.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let mut acc = x;
        for layer in &self.layers {
            let y = layer.forward(g, bound, acc)?;
            let y = g.relu(y);
            acc = g.concat_channels(acc, y)?;
        }
        Ok(acc)
    }
}

/// Encoder parameters and structure.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    top: Conv,
    blocks: [DenseBlock; 3],
    transitions: [Conv; 3],
    bottleneck: Conv,
}

/// Graph handles of an encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub f1: NodeId,
    pub f2: NodeId,
    pub f4: NodeId,
    pub supervision: NodeId,
}

/// Materialized encoder features for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Features<T> {
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
    pub f4: Tensor<T>,
    pub supervision: Tensor<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
        };
        let [c0, c1, c2] = config.level_channels;
        let grown = config.layers_per_block * config.growth_rate;
        let top = init.conv("encoder.top", config.input_channels, c0, 3);
        let b1 = DenseBlock::build(&mut init, "encoder.block1", c0, &config);
        let t1 = init.conv("encoder.transition1", c0 + grown, c0, 1);
        let b2 = DenseBlock::build(&mut init, "encoder.block2", c0, &config);
        let t2 = init.conv("encoder.transition2", c0 + grown, c1, 1);
        let b3 = DenseBlock::build(&mut init, "encoder.block3", c1, &config);
        let t3 = init.conv("encoder.transition3", c1 + grown, c2, 1);
        let bottleneck = init.conv("encoder.bottleneck", c2, config.bottleneck_channels, 1);
        Ok(Self {
            config,
            params,
            top,
            blocks: [b1, b2, b3],
            transitions: [t1, t2, t3],
            bottleneck,
        })
    }

    pub fn bottleneck(&self) -> Conv {
        self.bottleneck
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            top: self.top,
            blocks: self.blocks.clone(),
            transitions: self.transitions,
            bottleneck: self.bottleneck,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, image: NodeId) -> Result<EncoderOutput> {
        let (_, c, h, w) = dims4(g.value(image).shape(), "encoder_forward")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("encoder_forward", format!("input {h}x{w} is not divisible by 4")));
        }
        if c != self.config.input_channels {
            return Err(Error::shape(
                "encoder_forward",
                format!("input has {c} channels, config expects {}", self.config.input_channels),
            ));
        }
        let x = self.top.forward(g, bound, image)?;
        let mut x = g.relu(x);
        let mut levels = [x; 3];
        for (level, (block, transition)) in self.blocks.iter().zip(&self.transitions).enumerate() {
            if level > 0 {
                x = g.maxpool2(x)?;
            }
            let y = block.forward(g, bound, x)?;
            let y = transition.forward(g, bound, y)?;
            x = g.relu(y);
            levels[level] = x;
        }
        let logits = self.bottleneck.forward(g, bound, x)?;
        let supervision = g.sigmoid(logits);
        Ok(EncoderOutput {
            f1: levels[0],
            f2: levels[1],
            f4: levels[2],
            supervision,
        })
    }

    /// Forward pass with frozen parameters, returning owned feature tensors.
    pub fn features(&self, image: &Tensor<T>) -> Result<Features<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &bound, x)?;
        Ok(Features {
            f1: g.value(out.f1).clone(),
            f2: g.value(out.f2).clone(),
            f4: g.value(out.f4).clone(),
            supervision: g.value(out.supervision).clone(),
        })
    }
}

/// Up-sampling segmentation decoder over the three feature levels.
#[derive(Clone, Debug)]
pub struct SegDecoder<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    reduce4: Conv,
    merge2: Conv,
    merge1: Conv,
    head: Conv,
}

impl<T: Scalar> SegDecoder<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
        };
        let [c0, c1, c2] = config.level_channels;
        let reduce4 = init.conv("decoder.reduce4", c2, c1, 3);
        let merge2 = init.conv("decoder.merge2", 2 * c1, c0, 3);
        let merge1 = init.conv("decoder.merge1", 2 * c0, c0, 3);
        let head = init.conv("decoder.head", c0, config.bottleneck_channels, 1);
        Ok(Self {
            config,
            params,
            reduce4,
            merge2,
            merge1,
            head,
        })
    }

    pub fn cast<U: Scalar>(&self) -> SegDecoder<U> {
        SegDecoder {
            config: self.config.clone(),
            params: self.params.cast(),
            reduce4: self.reduce4,
            merge2: self.merge2,
            merge1: self.merge1,
            head: self.head,
        }
    }

    /// `f4` is reduced, up-sampled and merged with `f2`, then up-sampled
    /// again and merged with `f1`; a 1x1 convolution and sigmoid produce
    /// per-pixel class probabilities `[B, N, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, f1: NodeId, f2: NodeId, f4: NodeId) -> Result<NodeId> {
        let (b1, _, h1, w1) = dims4(g.value(f1).shape(), "seg_decoder_forward")?;
        let (b2, _, h2, w2) = dims4(g.value(f2).shape(), "seg_decoder_forward")?;
        let (b4, _, h4, w4) = dims4(g.value(f4).shape(), "seg_decoder_forward")?;
        if b1 != b2 || b2 != b4 || (h1, w1) != (2 * h2, 2 * w2) || (h2, w2) != (2 * h4, 2 * w4) {
            return Err(Error::shape(
                "seg_decoder_forward",
                format!(
                    "inconsistent features {:?}, {:?}, {:?}",
                    g.value(f1).shape(),
                    g.value(f2).shape(),
                    g.value(f4).shape()
                ),
            ));
        }
        let x = self.reduce4.forward(g, bound, f4)?;
        let x = g.relu(x);
        let x = g.upsample2_nearest(x)?;
        let x = g.concat_channels(x, f2)?;
        let x = self.merge2.forward(g, bound, x)?;
        let x = g.relu(x);
        let x = g.upsample2_nearest(x)?;
        let x = g.concat_channels(x, f1)?;
        let x = self.merge1.forward(g, bound, x)?;
        let x = g.relu(x);
        let x = self.head.forward(g, bound, x)?;
        Ok(g.sigmoid(x))
    }
}

/// Coordinate-regression head: 3x3 convolution and ReLU, a 1x1 convolution
/// to a single heat map, then the softmax-weighted mean pixel position.
#[derive(Clone, Debug)]
pub struct LocHead<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    hidden: Conv,
    score: Conv,
}

impl<T: Scalar> LocHead<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
        };
        let hidden = init.conv("loc.hidden", config.level_channels[2], config.head_channels, 3);
        let score = init.conv("loc.score", config.head_channels, 1, 1);
        Ok(Self {
            config,
            params,
            hidden,
            score,
        })
    }

    pub fn cast<U: Scalar>(&self) -> LocHead<U> {
        LocHead {
            config: self.config.clone(),
            params: self.params.cast(),
            hidden: self.hidden,
            score: self.score,
        }
    }

    /// Returns `[B, 2]` normalized `(x, y)` coordinates in the unit square.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, f4: NodeId) -> Result<NodeId> {
        let (_, c, _, _) = dims4(g.value(f4).shape(), "loc_head_forward")?;
        if c != self.config.level_channels[2] {
            return Err(Error::shape(
                "loc_head_forward",
                format!("expected {} channels, got {c}", self.config.level_channels[2]),
            ));
        }
        let x = self.hidden.forward(g, bound, f4)?;
        let x = g.relu(x);
        let x = self.score.forward(g, bound, x)?;
        g.spatial_soft_argmax(x)
    }
}

/// Posterior network of either task.
#[derive(Clone, Debug)]
pub enum Posterior<T> {
    Segmentation(SegDecoder<T>),
    Localization(LocHead<T>),
}

impl<T: Scalar> Posterior<T> {
    pub fn params(&self) -> &ParamStore<T> {
        match self {
            Posterior::Segmentation(d) => &d.params,
            Posterior::Localization(h) => &h.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Posterior::Segmentation(d) => &mut d.params,
            Posterior::Localization(h) => &mut h.params,
        }
    }
}

/// Exact scalar parameter count of a parameter set.
pub fn count_parameters<T: Scalar>(params: &ParamStore<T>) -> usize {
    params.scalar_count()
}

/// Sets every parameter of `store` whose name starts with `prefix` to zero.
pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str) {
    for (name, t) in store.iter_mut() {
        if name.starts_with(prefix) {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_encoder(enc: &Encoder<f32>, input: Tensor<f32>) -> Features<f32> {
        enc.features(&input).unwrap()
    }

    #[test]
    fn encoder_shapes_for_default_config() {
        let enc = Encoder::<f32>::new(ModelConfig::default(), 1).unwrap();
        let f = run_encoder(&enc, Tensor::full(&[1, 1, 64, 64], 0.3));
        assert_eq!(f.f1.shape(), &[1, 16, 64, 64]);
        assert_eq!(f.f2.shape(), &[1, 32, 32, 32]);
        assert_eq!(f.f4.shape(), &[1, 64, 16, 16]);
        assert_eq!(f.supervision.shape(), &[1, 4, 16, 16]);
        assert!(f.supervision.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn encoder_rejects_indivisible_input() {
        let enc = Encoder::<f32>::new(ModelConfig::default(), 1).unwrap();
        assert!(enc.features(&Tensor::zeros(&[1, 1, 30, 32])).is_err());
        assert!(enc.features(&Tensor::zeros(&[1, 2, 32, 32])).is_err());
    }

    #[test]
    fn zero_bottleneck_gives_half() {
        let mut enc = Encoder::<f32>::new(ModelConfig::default(), 3).unwrap();
        zero_params(&mut enc.params, "encoder.bottleneck");
        let f = run_encoder(&enc, Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 7) as f32 / 7.0));
        assert!(f.supervision.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_items_are_independent() {
        let enc = Encoder::<f32>::new(ModelConfig::default(), 5).unwrap();
        let a = Tensor::from_fn(&[1, 1, 16, 16], |i| ((i * 37) % 11) as f32 / 11.0);
        let b = Tensor::from_fn(&[1, 1, 16, 16], |i| ((i * 13) % 5) as f32 / 5.0);
        let both = Tensor::stack_batch(&[&a, &b]).unwrap();
        let fa = run_encoder(&enc, a);
        let fab = run_encoder(&enc, both);
        assert_eq!(fab.f4.shape()[0], 2);
        assert_eq!(fab.supervision.batch_item(0).unwrap(), fa.supervision);
        assert_eq!(fab.f1.batch_item(0).unwrap(), fa.f1);
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                growth_rate: 3,
                bottleneck_channels: 1,
                level_channels: [2, 5, 7],
                layers_per_block: 2,
                input_channels: 3,
                head_channels: 4,
            },
        ] {
            let enc = Encoder::<f32>::new(cfg.clone(), 0).unwrap();
            assert_eq!(count_parameters(&enc.params), cfg.encoder_param_count());
        }
        // hand derivation for the default configuration
        let top = 9 * 16 + 16;
        let block = |c: usize| (0..4).map(|l| 9 * (c + 8 * l) * 8 + 8).sum::<usize>();
        let expected = top
            + block(16)
            + (48 * 16 + 16)
            + block(16)
            + (48 * 32 + 32)
            + block(32)
            + (64 * 64 + 64)
            + (64 * 4 + 4);
        assert_eq!(ModelConfig::default().encoder_param_count(), expected);
        assert_eq!(count_parameters(&ParamStore::<f32>::new()), 0);
        let a = Encoder::<f32>::new(ModelConfig::default(), 1).unwrap();
        let b = Encoder::<f32>::new(ModelConfig::default(), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
    }

    #[test]
    fn config_validation() {
        let cfg = ModelConfig {
            level_channels: [16, 16, 64],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            growth_rate: 0,
            ..ModelConfig::default()
        };
        assert!(Encoder::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn decoder_shape_and_zero_output() {
        let cfg = ModelConfig::default();
        let mut dec = SegDecoder::<f32>::new(cfg.clone(), 0).unwrap();
        let mut g = Graph::new();
        let f1 = g.constant(Tensor::zeros(&[2, 16, 64, 64]));
        let f2 = g.constant(Tensor::zeros(&[2, 32, 32, 32]));
        let f4 = g.constant(Tensor::zeros(&[2, 64, 16, 16]));
        let bound = dec.params.bind(&mut g);
        let out = dec.forward(&mut g, &bound, f1, f2, f4).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 4, 64, 64]);

        zero_params(&mut dec.params, "decoder");
        let mut g = Graph::new();
        let f1 = g.constant(Tensor::zeros(&[1, 16, 8, 8]));
        let f2 = g.constant(Tensor::zeros(&[1, 32, 4, 4]));
        let f4 = g.constant(Tensor::zeros(&[1, 64, 2, 2]));
        let bound = dec.params.bind(&mut g);
        let out = dec.forward(&mut g, &bound, f1, f2, f4).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.5));

        let bad = g.constant(Tensor::zeros(&[1, 64, 3, 3]));
        assert!(dec.forward(&mut g, &bound, f1, f2, bad).is_err());
    }

    #[test]
    fn loc_head_zero_params_predicts_centre() {
        let mut head = LocHead::<f64>::new(ModelConfig::default(), 0).unwrap();
        zero_params(&mut head.params, "loc");
        let mut g = Graph::new();
        let f4 = g.constant(Tensor::from_fn(&[3, 64, 4, 4], |i| (i as f64).sin()));
        let bound = head.params.bind(&mut g);
        let out = head.forward(&mut g, &bound, f4).unwrap();
        assert_eq!(g.value(out).shape(), &[3, 2]);
        assert!(g.value(out).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn loc_head_output_in_unit_square() {
        let head = LocHead::<f32>::new(ModelConfig::default(), 9).unwrap();
        let mut g = Graph::new();
        let f4 = g.constant(Tensor::from_fn(&[2, 64, 16, 16], |i| ((i * 7919) % 1000) as f32 * 0.5));
        let bound = head.params.bind(&mut g);
        let out = head.forward(&mut g, &bound, f4).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
