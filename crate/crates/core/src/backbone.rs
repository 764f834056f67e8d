//! Shallow densely connected backbone and a two-level feature pyramid.
//!
//! Layout (strides relative to the input image):
//!
//! ```text
//! image -> stem 5x5/2 -> dense block 1 (s2) -> transition 2x2/2 -> dense block 2 (s4) = C2
//!                                           -> transition 2x2/2 -> dense block 3 (s8) = C3
//! P3 = lateral1x1(C3)
//! P2 = smooth3x3(lateral1x1(C2) + upsample2x(P3))
//! ```
//!
//! Each dense layer is a 1x1 bottleneck (2 * growth_rate channels) followed by a
//! 3x3 convolution producing `growth_rate` channels that are appended to the
//! block's running feature stack. Transitions project back to `stem_channels`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Init};
use crate::tensor::{Conv2dSpec, Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    C2,
    C3,
    P2,
    P3,
}

/// A feature map recorded on a graph, tagged with its level and stride in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureMap {
    pub level: Level,
    pub stride: usize,
    pub tensor: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub layers_per_block: usize,
    pub fpn_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_channels: 16,
            growth_rate: 8,
            layers_per_block: 2,
            fpn_channels: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.growth_rate == 0 || self.layers_per_block == 0 || self.fpn_channels == 0 {
            return Err(Error::Config(format!("backbone sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Channels of every dense block output (C2 and C3).
    pub fn block_channels(&self) -> usize {
        self.stem_channels + self.layers_per_block * self.growth_rate
    }
}

pub const C2_STRIDE: usize = 4;
pub const C3_STRIDE: usize = 8;

/// Rejects images the backbone cannot process.
pub fn check_image_shape(shape: &[usize]) -> Result<()> {
    match *shape {
        [h, w, 3] if h >= 32 && w >= 32 && h % 8 == 0 && w % 8 == 0 => Ok(()),
        _ => Err(Error::Shape(format!(
            "image must be HxWx3 with H, W >= 32 and divisible by 8, got {shape:?}"
        ))),
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    bottleneck: Conv,
    conv: Conv,
}

#[derive(Clone, Debug)]
struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let g = cfg.growth_rate;
        let mut layers = Vec::new();
        for i in 0..cfg.layers_per_block {
            let c = c_in + i * g;
            layers.push(DenseLayer {
                bottleneck: Conv::new(store, &format!("{name}.{i}.reduce"), (1, 1), c, 2 * g, Conv2dSpec::new(1, 0), Init::He, rng)?,
                conv: Conv::new(store, &format!("{name}.{i}.conv"), (3, 3), 2 * g, g, Conv2dSpec::new(1, 1), Init::He, rng)?,
            });
        }
        Ok(DenseBlock { layers })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut stack = x;
        for layer in &self.layers {
            let y = layer.bottleneck.forward_relu(g, stack)?;
            let y = layer.conv.forward_relu(g, y)?;
            stack = g.concat_last(&[stack, y])?;
        }
        Ok(stack)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv,
    block1: DenseBlock,
    trans1: Conv,
    block2: DenseBlock,
    trans2: Conv,
    block3: DenseBlock,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let s = config.stem_channels;
        let out = config.block_channels();
        Ok(Backbone {
            stem: Conv::new(store, "backbone.stem", (5, 5), 3, s, Conv2dSpec::new(2, 2), Init::He, rng)?,
            block1: DenseBlock::new(store, "backbone.block1", s, &config, rng)?,
            trans1: Conv::new(store, "backbone.trans1", (2, 2), out, s, Conv2dSpec::new(2, 0), Init::He, rng)?,
            block2: DenseBlock::new(store, "backbone.block2", s, &config, rng)?,
            trans2: Conv::new(store, "backbone.trans2", (2, 2), out, s, Conv2dSpec::new(2, 0), Init::He, rng)?,
            block3: DenseBlock::new(store, "backbone.block3", s, &config, rng)?,
            config,
        })
    }

    pub fn stem_kernel(&self) -> crate::tensor::ParamId {
        self.stem.kernel
    }

    /// Returns `(C2, C3)` for an `HxWx3` image.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<(FeatureMap, FeatureMap)> {
        check_image_shape(g.shape(image))?;
        let x = self.stem.forward_relu(g, image)?;
        let x = self.block1.forward(g, x)?;
        let x = self.trans1.forward_relu(g, x)?;
        let c2 = self.block2.forward(g, x)?;
        let x = self.trans2.forward_relu(g, c2)?;
        let c3 = self.block3.forward(g, x)?;
        Ok((
            FeatureMap { level: Level::C2, stride: C2_STRIDE, tensor: c2 },
            FeatureMap { level: Level::C3, stride: C3_STRIDE, tensor: c3 },
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Fpn {
    pub lateral2: Conv,
    pub lateral3: Conv,
    pub smooth: Conv,
}

impl Fpn {
    pub fn new(store: &mut ParamStore, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = config.block_channels();
        let f = config.fpn_channels;
        Ok(Fpn {
            lateral2: Conv::new(store, "fpn.lateral2", (1, 1), c, f, Conv2dSpec::new(1, 0), Init::He, rng)?,
            lateral3: Conv::new(store, "fpn.lateral3", (1, 1), c, f, Conv2dSpec::new(1, 0), Init::He, rng)?,
            smooth: Conv::new(store, "fpn.smooth", (3, 3), f, f, Conv2dSpec::new(1, 1), Init::He, rng)?,
        })
    }

    /// Returns `(P2, P3)`.
    pub fn forward(&self, g: &mut Graph, c2: &FeatureMap, c3: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        if c3.stride != 2 * c2.stride {
            return Err(Error::Shape(format!(
                "FPN needs C3 stride = 2 x C2 stride, got {} and {}",
                c3.stride, c2.stride
            )));
        }
        let p3 = self.lateral3.forward(g, c3.tensor)?;
        let lat2 = self.lateral2.forward(g, c2.tensor)?;
        let up = g.upsample2x(p3)?;
        let merged = g.add(lat2, up)?;
        let p2 = self.smooth.forward(g, merged)?;
        Ok((
            FeatureMap { level: Level::P2, stride: c2.stride, tensor: p2 },
            FeatureMap { level: Level::P3, stride: c3.stride, tensor: p3 },
        ))
    }
}
