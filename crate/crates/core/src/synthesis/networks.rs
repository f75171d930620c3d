//! 3D generator (encoder, residual blocks, decoder) and patch critic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::nn::{leaves, ConvLayer};
use crate::tensor::Tensor;
use crate::Scalar;

use super::SynthError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub num_downsamples: usize,
    pub num_resblocks: usize,
    pub leaky_slope: f64,
    /// Weight std of the output head; small values make the untrained generator near-identity.
    pub head_init_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { base_channels: 8, num_downsamples: 1, num_resblocks: 2, leaky_slope: 0.2, head_init_std: 1e-3 }
    }
}

impl GeneratorConfig {
    /// Image and mask.
    pub const IN_CHANNELS: usize = 2;
    pub const OUT_CHANNELS: usize = 1;

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.base_channels == 0 || self.num_downsamples == 0 || self.num_resblocks == 0 {
            return Err(SynthError::Config(format!("generator counts must be >= 1: {self:?}")));
        }
        if !(self.leaky_slope.is_finite() && self.head_init_std.is_finite() && self.head_init_std >= 0.0) {
            return Err(SynthError::Config(format!("generator settings not finite: {self:?}")));
        }
        Ok(())
    }

    /// Receptive field (voxels) of one output voxel, not counting growth from the decoder.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 3;
        let mut jump = 1;
        for _ in 0..self.num_downsamples {
            rf += 2 * jump;
            jump *= 2;
        }
        rf += self.num_resblocks * 2 * 2 * jump;
        rf + 2
    }

    /// Fails unless the receptive field spans a lesion of `diameter_vox` voxels.
    pub fn check_receptive_field(&self, diameter_vox: f64) -> Result<(), SynthError> {
        if (self.receptive_field() as f64) < diameter_vox {
            return Err(SynthError::Config(format!(
                "generator receptive field {} voxels is smaller than the largest lesion ({diameter_vox:.1} voxels)",
                self.receptive_field()
            )));
        }
        Ok(())
    }

    /// Every patch dimension must be divisible by `2^num_downsamples`.
    pub fn check_patch(&self, patch_xyz: [usize; 3]) -> Result<(), SynthError> {
        let f = 1 << self.num_downsamples;
        if patch_xyz.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(SynthError::Config(format!(
                "patch shape {patch_xyz:?} is not divisible by {f} ({} downsamplings)",
                self.num_downsamples
            )));
        }
        Ok(())
    }

    /// Layers in parameter order: stem, downsamplings, residual convs, upsamplings, head.
    pub fn layers(&self) -> Vec<ConvLayer> {
        let c = self.base_channels;
        let d = self.num_downsamples;
        let mut out = vec![ConvLayer::conv(Self::IN_CHANNELS, c, 3, 1, 1)];
        for i in 0..d {
            out.push(ConvLayer::conv(c << i, c << (i + 1), 3, 2, 1));
        }
        for _ in 0..2 * self.num_resblocks {
            out.push(ConvLayer::conv(c << d, c << d, 3, 1, 1));
        }
        for i in (0..d).rev() {
            out.push(ConvLayer::up(c << (i + 1), c << i, 4, 2, 1));
        }
        out.push(ConvLayer::conv(c, Self::OUT_CHANNELS, 3, 1, 1));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub num_layers: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 8, num_layers: 2, leaky_slope: 0.2 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.base_channels == 0 || self.num_layers == 0 || !self.leaky_slope.is_finite() {
            return Err(SynthError::Config(format!("invalid critic settings {self:?}")));
        }
        Ok(())
    }

    pub fn check_patch(&self, patch_xyz: [usize; 3]) -> Result<(), SynthError> {
        let min = 1usize << self.num_layers;
        if patch_xyz.iter().any(|&d| d < min) {
            return Err(SynthError::Config(format!(
                "patch shape {patch_xyz:?} too small for a {}-layer critic (needs >= {min})",
                self.num_layers
            )));
        }
        Ok(())
    }

    /// Strided k4 convolutions followed by a k3 single-channel head.
    pub fn layers(&self) -> Vec<ConvLayer> {
        let c = self.base_channels;
        let mut out = vec![ConvLayer::conv(1, c, 4, 2, 1)];
        for i in 1..self.num_layers {
            out.push(ConvLayer::conv(c << (i - 1), c << i, 4, 2, 1));
        }
        out.push(ConvLayer::conv(c << (self.num_layers - 1), 1, 3, 1, 1));
        out
    }
}

/// Parameters are stored as `[w0, b0, w1, b1, ...]` following `config.layers()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self, SynthError> {
        config.validate()?;
        let layers = config.layers();
        let last = layers.len() - 1;
        let mut params = Vec::with_capacity(2 * layers.len());
        for (i, l) in layers.iter().enumerate() {
            let std = if i == last { Some(config.head_init_std) } else { None };
            params.extend(l.init(std, rng));
        }
        Ok(Self { config, params })
    }

    /// `clamp01(image + tanh(head(...)))` for `[N, 1, Z, Y, X]` image and mask batches.
    pub fn forward<'t>(&self, params: &[Var<'t, T>], image: Var<'t, T>, mask: Var<'t, T>) -> Var<'t, T> {
        let layers = self.config.layers();
        let slope = T::of(self.config.leaky_slope);
        let mut next = 0;
        let mut layer = |h: Var<'t, T>| {
            let i = next;
            next += 1;
            layers[i].apply(h, params[2 * i], params[2 * i + 1])
        };
        let mut h = layer(image.concat_channels(mask)).leaky_relu(slope);
        let mut skips = vec![h];
        for _ in 0..self.config.num_downsamples {
            h = layer(h).leaky_relu(slope);
            skips.push(h);
        }
        skips.pop();
        for _ in 0..self.config.num_resblocks {
            let t = layer(h).leaky_relu(slope);
            h = h + layer(t);
        }
        while let Some(skip) = skips.pop() {
            h = layer(h).leaky_relu(slope) + skip;
        }
        (image + layer(h).tanh()).clamp01()
    }

    /// Forward pass without gradient tracking.
    pub fn apply(&self, image: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
        let tape = Tape::new();
        let p = leaves(&tape, &self.params);
        let out = self.forward(&p, tape.leaf(image.clone()), tape.leaf(mask.clone()));
        (*out.value()).clone()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Critic<T> {
    pub config: DiscriminatorConfig,
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> Critic<T> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self, SynthError> {
        config.validate()?;
        let params = config.layers().iter().flat_map(|l| l.init(None, rng)).collect();
        Ok(Self { config, params })
    }

    /// Per-sample critic score `[N]`: the spatial mean of the critic map.
    pub fn forward<'t>(&self, params: &[Var<'t, T>], image: Var<'t, T>) -> Var<'t, T> {
        let layers = self.config.layers();
        let slope = T::of(self.config.leaky_slope);
        let mut h = image;
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            h = l.apply(h, params[2 * i], params[2 * i + 1]);
            if i < last {
                h = h.leaky_relu(slope);
            }
        }
        h.spatial_mean().sum_per_sample()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }
}
