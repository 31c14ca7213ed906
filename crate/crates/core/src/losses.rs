//! Training losses and the weighted generator objective.
//!
//! Every loss has an on-tape form used for training and a plain form that
//! evaluates the same graph on constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, ParamStore};
use crate::rng;
use crate::structure::{self, GaborBank};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_pixel: f64,
    pub w_adv: f64,
    pub w_style: f64,
    pub w_fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_pixel: 100.0,
            w_adv: 1.0,
            w_style: 10.0,
            w_fm: 10.0,
        }
    }
}

impl LossWeights {
    pub fn new(w_pixel: f64, w_adv: f64, w_style: f64, w_fm: f64) -> Result<Self> {
        let w = Self {
            w_pixel,
            w_adv,
            w_style,
            w_fm,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.as_array();
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w_pixel, self.w_adv, self.w_style, self.w_fm]
    }
}

/// The four generator loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub pixel: f64,
    pub adv: f64,
    pub style: f64,
    pub fm: f64,
}

impl LossParts {
    pub fn as_array(&self) -> [f64; 4] {
        [self.pixel, self.adv, self.style, self.fm]
    }
}

pub fn total_objective(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    if parts.as_array().iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid(format!("non-finite loss part in {parts:?}")));
    }
    Ok(parts
        .as_array()
        .iter()
        .zip(weights.as_array())
        .map(|(p, w)| p * w)
        .sum())
}

/// Terms in the order pixel, adv, style, fm.
pub fn total_objective_on_tape(
    tape: &mut Tape,
    parts: [Var; 4],
    weights: &LossWeights,
) -> Result<Var> {
    tape.weighted_sum(&parts, &weights.as_array())
}

pub fn pixel_loss_on_tape(tape: &mut Tape, output: Var, target: Var) -> Result<Var> {
    let d = tape.sub(output, target)?;
    let a = tape.abs(d)?;
    Ok(tape.mean(a))
}

pub fn pixel_loss(output: &Tensor, target: &Tensor) -> Result<f64> {
    on_constants(&[output, target], |t, v| pixel_loss_on_tape(t, v[0], v[1]))
}

/// Scores are clamped to `[SCORE_EPS, 1 - SCORE_EPS]` before the log.
pub const SCORE_EPS: f64 = 1e-7;

fn mean_log_clamped(tape: &mut Tape, scores: Var) -> Result<Var> {
    let c = tape.clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS)?;
    let l = tape.log(c)?;
    Ok(tape.mean(l))
}

/// Mean of `-log D` over all patches for discriminator scores in (0, 1).
pub fn adv_loss_generator_on_tape(tape: &mut Tape, scores: Var) -> Result<Var> {
    let m = mean_log_clamped(tape, scores)?;
    tape.scale(m, -1.0)
}

pub fn adv_loss_generator(scores: &Tensor) -> Result<f64> {
    on_constants(&[scores], |t, v| adv_loss_generator_on_tape(t, v[0]))
}

/// `-mean log D(real) - mean log (1 - D(fake))` on scores.
pub fn adv_loss_discriminator_on_tape(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    let real_term = mean_log_clamped(tape, real)?;
    let flipped = tape.scale(fake, -1.0)?;
    let flipped = tape.add_scalar(flipped, 1.0)?;
    let fake_term = mean_log_clamped(tape, flipped)?;
    let sum = tape.add(real_term, fake_term)?;
    tape.scale(sum, -1.0)
}

pub fn adv_loss_discriminator(real: &Tensor, fake: &Tensor) -> Result<f64> {
    on_constants(&[real, fake], |t, v| {
        adv_loss_discriminator_on_tape(t, v[0], v[1])
    })
}

/// The generator loss computed from pre-sigmoid logits. Equal to the score
/// form wherever the clamp is inactive, but a saturated discriminator still
/// passes a gradient back, which the clamped form does not. Training uses
/// this one.
pub fn adv_loss_generator_logits_on_tape(tape: &mut Tape, logits: Var) -> Result<Var> {
    let l = tape.log_sigmoid(logits)?;
    let m = tape.mean(l);
    tape.scale(m, -1.0)
}

pub fn adv_loss_generator_logits(logits: &Tensor) -> Result<f64> {
    on_constants(&[logits], |t, v| adv_loss_generator_logits_on_tape(t, v[0]))
}

pub fn adv_loss_discriminator_logits_on_tape(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    let real_term = adv_loss_generator_logits_on_tape(tape, real)?;
    // 1 - σ(z) = σ(-z)
    let neg = tape.scale(fake, -1.0)?;
    let fake_term = adv_loss_generator_logits_on_tape(tape, neg)?;
    tape.add(real_term, fake_term)
}

pub fn adv_loss_discriminator_logits(real: &Tensor, fake: &Tensor) -> Result<f64> {
    on_constants(&[real, fake], |t, v| {
        adv_loss_discriminator_logits_on_tape(t, v[0], v[1])
    })
}

/// `χχᵀ / (C·H·W)` with `χ` the C×HW reshape of a C×H×W feature map.
pub fn gram_on_tape(tape: &mut Tape, features: Var) -> Result<Var> {
    let (c, h, w) = tape.try_value(features)?.dims3()?;
    let chi = tape.reshape(features, &[c, h * w])?;
    let chi_t = tape.transpose(chi)?;
    let g = tape.matmul(chi, chi_t)?;
    tape.scale(g, 1.0 / (c * h * w) as f64)
}

pub fn gram(features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let g = gram_on_tape(&mut tape, x)?;
    Ok(tape.value(g).clone())
}

/// Fixed random convolutional features standing in for a pretrained
/// perceptual network. Weights never change after construction.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    seed: u64,
    params: ParamStore,
    layers: Vec<(Conv, bool)>,
    taps: Vec<usize>,
}

pub const EXTRACTOR_CHANNELS: [usize; 5] = [3, 16, 32, 64, 64];

impl FeatureExtractor {
    /// Four 3x3 layers with a 2x pool after the second and fourth; taps are
    /// the activations of layers two and three.
    pub fn new(seed: u64) -> Self {
        let mut rng = rng::stream(seed, "feature-extractor", 0);
        let mut params = ParamStore::new();
        let layers = EXTRACTOR_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let conv = Conv::new(&mut params, &format!("fx{i}"), io[0], io[1], 3, &mut rng);
                (conv, i % 2 == 1)
            })
            .collect();
        Self {
            seed,
            params,
            layers,
            taps: vec![2, 3],
        }
    }

    /// No layers; the single tap is the image itself.
    pub fn identity() -> Self {
        Self {
            seed: 0,
            params: ParamStore::new(),
            layers: Vec::new(),
            taps: vec![0],
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }

    /// Tap activations, shallowest first. Tap `n` is the output of layer
    /// `n` before its pooling.
    pub fn features_on_tape(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let bound: Bound = self.params.bind(tape, false);
        let mut out = Vec::with_capacity(self.taps.len());
        let mut x = image;
        if self.taps.contains(&0) {
            out.push(x);
        }
        for (i, (conv, pool)) in self.layers.iter().enumerate() {
            x = conv.forward_lrelu(tape, &bound, x)?;
            if self.taps.contains(&(i + 1)) {
                out.push(x);
            }
            if out.len() == self.taps.len() {
                break;
            }
            if *pool {
                x = tape.avg_pool2(x)?;
            }
        }
        Ok(out)
    }

    pub fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let vars = self.features_on_tape(&mut tape, x)?;
        Ok(vars.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Gram matrices of every tap, for use as cached style targets.
    pub fn grams(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.features(image)?.iter().map(gram).collect()
    }
}

/// Sum over taps of the squared Frobenius distance between Gram matrices,
/// against precomputed target Grams.
pub fn style_loss_to_grams(
    tape: &mut Tape,
    output: Var,
    target_grams: &[Tensor],
    extractor: &FeatureExtractor,
) -> Result<Var> {
    if target_grams.len() != extractor.tap_count() {
        return Err(Error::shape(format!(
            "{} target Gram matrices for {} taps",
            target_grams.len(),
            extractor.tap_count()
        )));
    }
    let feats = extractor.features_on_tape(tape, output)?;
    let mut terms = Vec::with_capacity(feats.len());
    for (f, target) in feats.into_iter().zip(target_grams) {
        let g = gram_on_tape(tape, f)?;
        let t = tape.constant(target.clone());
        let d = tape.sub(g, t)?;
        let sq = tape.square(d)?;
        terms.push(tape.sum(sq));
    }
    tape.weighted_sum(&terms, &vec![1.0; terms.len()])
}

pub fn style_loss_on_tape(
    tape: &mut Tape,
    output: Var,
    target: Var,
    extractor: &FeatureExtractor,
) -> Result<Var> {
    tape.try_value(output)?
        .expect_same_shape(tape.try_value(target)?)?;
    let fo = extractor.features_on_tape(tape, output)?;
    let ft = extractor.features_on_tape(tape, target)?;
    let mut terms = Vec::with_capacity(fo.len());
    for (a, b) in fo.into_iter().zip(ft) {
        let ga = gram_on_tape(tape, a)?;
        let gb = gram_on_tape(tape, b)?;
        let d = tape.sub(ga, gb)?;
        let sq = tape.square(d)?;
        terms.push(tape.sum(sq));
    }
    tape.weighted_sum(&terms, &vec![1.0; terms.len()])
}

pub fn style_loss(output: &Tensor, target: &Tensor, extractor: &FeatureExtractor) -> Result<f64> {
    on_constants(&[output, target], |t, v| {
        style_loss_on_tape(t, v[0], v[1], extractor)
    })
}

/// `Σ_i mean|realᵢ − fakeᵢ|` over discriminator layers.
pub fn fm_loss_on_tape(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::shape(format!(
            "feature matching needs equal, nonempty layer lists ({} vs {})",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        terms.push(pixel_loss_on_tape(tape, r, f)?);
    }
    tape.weighted_sum(&terms, &vec![1.0; terms.len()])
}

pub fn fm_loss(real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let r: Vec<Var> = real.iter().map(|t| tape.constant(t.clone())).collect();
    let f: Vec<Var> = fake.iter().map(|t| tape.constant(t.clone())).collect();
    let l = fm_loss_on_tape(&mut tape, &r, &f)?;
    tape.value(l).item()
}

/// Sum of absolute differences between the single-application texture map
/// of `output` and a given target texture map.
pub fn texture_loss_to_map(
    tape: &mut Tape,
    output: Var,
    target_texture: &Tensor,
    bank: &GaborBank,
) -> Result<Var> {
    let t_out = structure::texture_on_tape(tape, output, bank)?;
    let t_tgt = tape.constant(target_texture.clone());
    let d = tape.sub(t_out, t_tgt)?;
    let a = tape.abs(d)?;
    Ok(tape.sum(a))
}

pub fn texture_loss_on_tape(
    tape: &mut Tape,
    output: Var,
    target: Var,
    bank: &GaborBank,
) -> Result<Var> {
    tape.try_value(output)?
        .expect_same_shape(tape.try_value(target)?)?;
    let t_out = structure::texture_on_tape(tape, output, bank)?;
    let t_tgt = structure::texture_on_tape(tape, target, bank)?;
    let d = tape.sub(t_out, t_tgt)?;
    let a = tape.abs(d)?;
    Ok(tape.sum(a))
}

pub fn texture_loss(output: &Tensor, target: &Tensor, bank: &GaborBank) -> Result<f64> {
    on_constants(&[output, target], |t, v| {
        texture_loss_on_tape(t, v[0], v[1], bank)
    })
}

/// Single-application texture map of an image.
pub fn texture_map(image: &Tensor, bank: &GaborBank) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let t = structure::texture_on_tape(&mut tape, x, bank)?;
    Ok(tape.value(t).clone())
}

fn on_constants<F>(inputs: &[&Tensor], f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}
