//! Generators and the patch discriminator.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;

use super::params::{Bound, Conv, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    /// Number of pooling levels; the bottleneck is `input / 2^depth`.
    pub depth: usize,
    /// Upsampling stages appended after the decoder.
    pub extra_up: usize,
}

impl UNetConfig {
    fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.base_channels == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::invalid(format!("degenerate U-Net config {self:?}")));
        }
        if self.depth > 12 || self.extra_up > 6 || self.base_channels > 1024 {
            return Err(Error::invalid(format!("U-Net config too large {self:?}")));
        }
        Ok(())
    }
}

/// Encoder-decoder with a skip connection at every level and a sigmoid head.
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    encoder: Vec<Conv>,
    bottleneck: Conv,
    decoder: Vec<Conv>,
    extra: Vec<Conv>,
    head: Conv,
}

pub struct UNetOutput {
    pub output: Var,
    pub bottleneck: Var,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "unet-init", 0);
        let mut params = ParamStore::new();
        let mut encoder = Vec::new();
        let mut prev = config.in_channels;
        for level in 0..config.depth {
            let out = config.channels(level);
            encoder.push(Conv::new(
                &mut params,
                &format!("enc{level}"),
                prev,
                out,
                3,
                &mut rng,
            ));
            prev = out;
        }
        let mid = config.channels(config.depth);
        let bottleneck = Conv::new(&mut params, "bottleneck", prev, mid, 3, &mut rng);
        prev = mid;
        let mut decoder = Vec::new();
        for level in (0..config.depth).rev() {
            let out = config.channels(level);
            decoder.push(Conv::new(
                &mut params,
                &format!("dec{level}"),
                prev + out,
                out,
                3,
                &mut rng,
            ));
            prev = out;
        }
        let mut extra = Vec::new();
        for j in 0..config.extra_up {
            extra.push(Conv::new(
                &mut params,
                &format!("up{j}"),
                prev,
                config.base_channels,
                3,
                &mut rng,
            ));
            prev = config.base_channels;
        }
        let head = Conv::new(&mut params, "head", prev, config.out_channels, 1, &mut rng);
        Ok(Self {
            config,
            params,
            encoder,
            bottleneck,
            decoder,
            extra,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<UNetOutput> {
        let (c, h, w) = tape.try_value(input)?.dims3()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "U-Net expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let scale = 1usize << self.config.depth;
        if h % scale != 0 || w % scale != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "{h}x{w} input is not divisible by 2^{}",
                self.config.depth
            )));
        }
        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth);
        for conv in &self.encoder {
            x = conv.forward_lrelu(tape, bound, x)?;
            skips.push(x);
            x = tape.avg_pool2(x)?;
        }
        x = self.bottleneck.forward_lrelu(tape, bound, x)?;
        let bottleneck = x;
        for (conv, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            x = tape.upsample2(x)?;
            x = tape.concat(&[x, *skip])?;
            x = conv.forward_lrelu(tape, bound, x)?;
        }
        for conv in &self.extra {
            x = tape.upsample2(x)?;
            x = conv.forward_lrelu(tape, bound, x)?;
        }
        let logits = self.head.forward(tape, bound, x)?;
        let output = tape.sigmoid(logits)?;
        Ok(UNetOutput { output, bottleneck })
    }
}

fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// Phase-one translation network.
#[derive(Clone, Debug)]
pub struct BasicGenerator {
    pub unet: UNet,
}

impl BasicGenerator {
    /// `input_size` is the spatial extent of the guidance image; `upscale`
    /// is 1 for sketches and the super-resolution factor otherwise.
    pub fn new(
        in_channels: usize,
        input_size: usize,
        upscale: usize,
        base_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        if !is_power_of_two(input_size) || !is_power_of_two(upscale) {
            return Err(Error::invalid(format!(
                "input size {input_size} and upscale {upscale} must be powers of two"
            )));
        }
        let unet = UNet::new(
            UNetConfig {
                in_channels,
                out_channels: 3,
                base_channels,
                depth: input_size.trailing_zeros() as usize,
                extra_up: upscale.trailing_zeros() as usize,
            },
            seed,
        )?;
        Ok(Self { unet })
    }

    pub fn from_unet(unet: UNet) -> Self {
        Self { unet }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        let (_, h, w) = tape.try_value(input)?.dims3()?;
        if !is_power_of_two(h) || h != w {
            return Err(Error::shape(format!(
                "basic network input must be square with a power-of-two side, got {h}x{w}"
            )));
        }
        Ok(self.unet.forward(tape, bound, input)?.output)
    }
}

/// Phase-two network fed with the coarse image, its structure encoding and
/// an optional auxiliary image.
#[derive(Clone, Debug)]
pub struct Regenerator {
    pub unet: UNet,
    pub with_aux: bool,
}

pub const STRUCTURE_CHANNELS: usize = 3;

impl Regenerator {
    pub fn new(with_aux: bool, base_channels: usize, depth: usize, seed: u64) -> Result<Self> {
        let in_channels = 3 + STRUCTURE_CHANNELS + if with_aux { 3 } else { 0 };
        let unet = UNet::new(
            UNetConfig {
                in_channels,
                out_channels: 3,
                base_channels,
                depth,
                extra_up: 0,
            },
            seed,
        )?;
        Ok(Self { unet, with_aux })
    }

    pub fn from_unet(unet: UNet) -> Result<Self> {
        let with_aux = match unet.config().in_channels {
            6 => false,
            9 => true,
            c => {
                return Err(Error::shape(format!(
                    "regenerator cannot take {c} channels"
                )))
            }
        };
        Ok(Self { unet, with_aux })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        coarse: Var,
        structure: Var,
        aux: Option<Var>,
    ) -> Result<Var> {
        let (_, h, w) = tape.try_value(coarse)?.dims3()?;
        let mut parts = vec![coarse, structure];
        match (aux, self.with_aux) {
            (Some(a), true) => parts.push(a),
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::invalid("this regenerator takes no auxiliary image"))
            }
            (None, true) => {
                return Err(Error::invalid("this regenerator needs an auxiliary image"))
            }
        }
        for &p in &parts[1..] {
            let (_, ph, pw) = tape.try_value(p)?.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "regenerator inputs differ in size: {h}x{w} vs {ph}x{pw}"
                )));
            }
        }
        let x = tape.concat(&parts)?;
        Ok(self.unet.forward(tape, bound, x)?.output)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub layers: usize,
}

/// Conditional patch discriminator. Each layer is a 3x3 convolution, a
/// leaky rectifier and a 2x average pool; every layer's output is exported
/// for feature matching.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    config: DiscConfig,
    params: ParamStore,
    layers: Vec<Conv>,
    score: Conv,
}

pub struct DiscOutput {
    /// Pre-sigmoid patch scores; the adversarial losses work on these.
    pub logits: Var,
    pub scores: Var,
    pub features: Vec<Var>,
}

impl PatchDiscriminator {
    pub fn new(config: DiscConfig, seed: u64) -> Result<Self> {
        if config.layers == 0
            || config.base_channels == 0
            || config.in_channels == 0
            || config.layers > 8
        {
            return Err(Error::invalid(format!(
                "bad discriminator config {config:?}"
            )));
        }
        let mut rng = rng::stream(seed, "disc-init", 0);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut prev = config.in_channels;
        for l in 0..config.layers {
            let out = config.base_channels << l.min(3);
            layers.push(Conv::new(
                &mut params,
                &format!("layer{l}"),
                prev,
                out,
                3,
                &mut rng,
            ));
            prev = out;
        }
        let score = Conv::new(&mut params, "score", prev, 1, 3, &mut rng);
        Ok(Self {
            config,
            params,
            layers,
            score,
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: Var,
        condition: Var,
    ) -> Result<DiscOutput> {
        let (_, h, w) = tape.try_value(image)?.dims3()?;
        let (_, ch, cw) = tape.try_value(condition)?.dims3()?;
        if (h, w) != (ch, cw) {
            return Err(Error::shape(format!(
                "image {h}x{w} and condition {ch}x{cw} differ in size"
            )));
        }
        let mut x = tape.concat(&[image, condition])?;
        let mut features = Vec::with_capacity(self.layers.len());
        for conv in &self.layers {
            x = conv.forward_lrelu(tape, bound, x)?;
            x = tape.avg_pool2(x)?;
            features.push(x);
        }
        let logits = self.score.forward(tape, bound, x)?;
        let scores = tape.sigmoid(logits)?;
        Ok(DiscOutput {
            logits,
            scores,
            features,
        })
    }
}
