//! Oriented cosine Gabor bank and the differentiable structure extraction
//! layer.
//!
//! Kernel coordinates: `u` is the column offset and `v` the row offset from
//! the kernel centre (rows grow downwards). A kernel at angle `θ` oscillates
//! along `(cos θ, sin θ)`, so it answers to stripes whose strands run along
//! `θ + π/2`.
//!
//! The texture map of one application is the per-pixel maximum response.
//! The orientation map is the angle whose response has the largest
//! magnitude: a stripe pattern drives its matching kernel strongly negative
//! between strands, and a signed argmax would label those pixels with an
//! unrelated angle.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{channel_argmax, IndexMap, Tape, Var};
use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Grid used to make the DC-corrected kernels sum to exactly zero.
const DC_QUANTUM: f64 = 1.0 / (1u64 << 45) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankParams {
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub lambda: f64,
    pub count: usize,
    pub support: usize,
}

impl Default for BankParams {
    fn default() -> Self {
        Self {
            sigma_u: 1.8,
            sigma_v: 2.4,
            lambda: 4.0,
            count: 8,
            support: 11,
        }
    }
}

impl BankParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_u", self.sigma_u),
            ("sigma_v", self.sigma_v),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.count < 2 {
            return Err(Error::invalid(format!(
                "a bank needs at least 2 orientations, got {}",
                self.count
            )));
        }
        if self.count > 64 || self.support > 63 {
            return Err(Error::invalid(
                "bank limited to 64 orientations and 63-pixel support",
            ));
        }
        if self.support.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel support must be odd, got {}",
                self.support
            )));
        }
        let min = 2.0 * (2.0 * self.sigma_u.max(self.sigma_v)).ceil() + 1.0;
        if (self.support as f64) < min {
            return Err(Error::invalid(format!(
                "kernel support {} is below {min} for these spreads",
                self.support
            )));
        }
        Ok(())
    }
}

/// The even-symmetric cosine Gabor kernel, evaluated directly.
pub fn gabor_value(sigma_u: f64, sigma_v: f64, lambda: f64, theta: f64, u: f64, v: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let ut = u * c + v * s;
    let vt = -u * s + v * c;
    // |ũ| keeps K(u, v) and K(-u, -v) bit-identical.
    (-0.5 * (ut * ut / (sigma_u * sigma_u) + vt * vt / (sigma_v * sigma_v))).exp()
        * (2.0 * PI * ut.abs() / lambda).cos()
}

#[derive(Clone, Debug)]
pub struct GaborBank {
    params: BankParams,
    orientations: Vec<f64>,
    raw: Tensor,
    kernels: Tensor,
}

impl GaborBank {
    pub fn new(params: BankParams) -> Result<Self> {
        params.validate()?;
        let BankParams {
            sigma_u,
            sigma_v,
            lambda,
            count,
            support,
        } = params;
        let half = (support / 2) as isize;
        let orientations: Vec<f64> = (0..count).map(|k| k as f64 * PI / count as f64).collect();
        let plane = support * support;
        let mut raw = Vec::with_capacity(count * plane);
        let mut corrected = Vec::with_capacity(count * plane);
        for &theta in &orientations {
            let kernel: Vec<f64> = (0..plane)
                .map(|i| {
                    let v = (i / support) as isize - half;
                    let u = (i % support) as isize - half;
                    gabor_value(sigma_u, sigma_v, lambda, theta, u as f64, v as f64)
                })
                .collect();
            corrected.extend(zero_mean(&kernel));
            raw.extend(kernel);
        }
        let shape = [count, 1, support, support];
        Ok(Self {
            params,
            orientations,
            raw: Tensor::from_parts(shape.to_vec(), raw),
            kernels: Tensor::from_parts(shape.to_vec(), corrected),
        })
    }

    pub fn params(&self) -> &BankParams {
        &self.params
    }

    pub fn orientations(&self) -> &[f64] {
        &self.orientations
    }

    pub fn len(&self) -> usize {
        self.orientations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orientations.is_empty()
    }

    pub fn support(&self) -> usize {
        self.params.support
    }

    /// Kernels before DC correction, `K x 1 x S x S`.
    pub fn raw_kernels(&self) -> &Tensor {
        &self.raw
    }

    /// DC-corrected kernels used for filtering, `K x 1 x S x S`.
    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    /// Raw kernel entry at orientation index `k`, column offset `u`, row
    /// offset `v`.
    pub fn raw_at(&self, k: usize, u: isize, v: isize) -> f64 {
        self.raw.data()[self.offset(k, u, v)]
    }

    pub fn kernel_at(&self, k: usize, u: isize, v: isize) -> f64 {
        self.kernels.data()[self.offset(k, u, v)]
    }

    fn offset(&self, k: usize, u: isize, v: isize) -> usize {
        let s = self.params.support;
        let half = (s / 2) as isize;
        assert!(
            u.abs() <= half && v.abs() <= half,
            "offset outside the kernel"
        );
        k * s * s + (v + half) as usize * s + (u + half) as usize
    }

    /// Index of the bank angle closest to `angle` on the π-periodic circle.
    pub fn nearest_index(&self, angle: f64) -> usize {
        (0..self.len())
            .min_by(|&a, &b| {
                angle_distance(self.orientations[a], angle)
                    .total_cmp(&angle_distance(self.orientations[b], angle))
            })
            .unwrap_or(0)
    }
}

pub fn build_bank(
    sigma_u: f64,
    sigma_v: f64,
    lambda: f64,
    count: usize,
    support: usize,
) -> Result<GaborBank> {
    GaborBank::new(BankParams {
        sigma_u,
        sigma_v,
        lambda,
        count,
        support,
    })
}

/// Subtracts the mean, then snaps to a dyadic grid and spreads the rounding
/// residue over mirrored pairs so the entries sum to exactly zero while
/// staying even-symmetric. Flat inputs with short mantissas then give an
/// exactly zero response.
fn zero_mean(kernel: &[f64]) -> Vec<f64> {
    let n = kernel.len();
    let mean = kernel.iter().sum::<f64>() / n as f64;
    let mut units: Vec<i64> = kernel
        .iter()
        .map(|&k| ((k - mean) / DC_QUANTUM).round() as i64)
        .collect();
    let mut residue: i64 = units.iter().sum();
    let center = n / 2;
    let mut pair = 0;
    while residue != 0 {
        let step = residue.signum();
        if residue.abs() >= 2 {
            let i = pair % center;
            units[i] -= step;
            units[n - 1 - i] -= step;
            residue -= 2 * step;
            pair += 1;
        } else {
            units[center] -= step;
            residue -= step;
        }
    }
    units.into_iter().map(|u| u as f64 * DC_QUANTUM).collect()
}

/// Circular distance between two orientations modulo π.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

pub fn luminance(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    match c {
        1 => Ok(image.clone()),
        3 => {
            let plane = h * w;
            let d = image.data();
            Ok(Tensor::from_fn(&[1, h, w], |i| {
                LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i]
            }))
        }
        _ => Err(Error::shape(format!(
            "luminance needs 1 or 3 channels, got {c}"
        ))),
    }
}

/// Differentiable luminance: a 1x1 convolution with the luma weights.
pub fn luminance_on_tape(tape: &mut Tape, image: Var) -> Result<Var> {
    let (c, _, _) = tape.value(image).dims3()?;
    match c {
        1 => Ok(image),
        3 => {
            let w = tape.constant(Tensor::from_parts(vec![1, 3, 1, 1], LUMA.to_vec()));
            tape.conv2d(image, w, Padding::Zero)
        }
        _ => Err(Error::shape(format!(
            "luminance needs 1 or 3 channels, got {c}"
        ))),
    }
}

/// Texture and orientation maps of one image, both applications.
#[derive(Clone, Debug)]
pub struct StructurePair {
    /// Texture after the second application.
    pub texture: Tensor,
    /// Orientation angles after the second application.
    pub orientation: Tensor,
    pub raw_texture: Tensor,
    pub raw_orientation: Tensor,
    pub orientation_index: IndexMap,
    pub raw_orientation_index: IndexMap,
}

/// Tape-resident extraction result; the texture maps are differentiable,
/// the orientation maps are constants.
#[derive(Clone, Debug)]
pub struct StructureVars {
    pub texture: Var,
    pub raw_texture: Var,
    pub orientation_index: IndexMap,
    pub raw_orientation_index: IndexMap,
}

impl StructureVars {
    pub fn to_pair(&self, tape: &Tape, bank: &GaborBank) -> StructurePair {
        StructurePair {
            texture: tape.value(self.texture).clone(),
            orientation: angles(&self.orientation_index, bank),
            raw_texture: tape.value(self.raw_texture).clone(),
            raw_orientation: angles(&self.raw_orientation_index, bank),
            orientation_index: self.orientation_index.clone(),
            raw_orientation_index: self.raw_orientation_index.clone(),
        }
    }
}

fn angles(map: &IndexMap, bank: &GaborBank) -> Tensor {
    Tensor::from_parts(
        vec![1, map.height, map.width],
        map.indices
            .iter()
            .map(|&k| bank.orientations()[k])
            .collect(),
    )
}

/// One application of the layer to a single-channel map.
fn apply_once(tape: &mut Tape, single: Var, kernels: Var) -> Result<(Var, IndexMap)> {
    let responses = tape.conv2d(single, kernels, Padding::Reflect)?;
    let texture = tape.channel_max(responses)?.values;
    let magnitude = tape.value(responses).map(f64::abs);
    let (_, orientation) = channel_argmax(&magnitude)?;
    Ok((texture, orientation))
}

/// Single application on the luminance of `image`; used by the texture loss.
pub fn texture_on_tape(tape: &mut Tape, image: Var, bank: &GaborBank) -> Result<Var> {
    let lum = luminance_on_tape(tape, image)?;
    let kernels = tape.constant(bank.kernels().clone());
    Ok(apply_once(tape, lum, kernels)?.0)
}

/// Filters the luminance, takes the per-pixel max, then filters that first
/// texture map again with the same bank.
pub fn extract_on_tape(tape: &mut Tape, image: Var, bank: &GaborBank) -> Result<StructureVars> {
    if !tape.try_value(image)?.all_finite() {
        return Err(Error::invalid("extract needs a finite image"));
    }
    let lum = luminance_on_tape(tape, image)?;
    let kernels = tape.constant(bank.kernels().clone());
    let (raw_texture, raw_orientation_index) = apply_once(tape, lum, kernels)?;
    let (texture, orientation_index) = apply_once(tape, raw_texture, kernels)?;
    Ok(StructureVars {
        texture,
        raw_texture,
        orientation_index,
        raw_orientation_index,
    })
}

pub fn extract(image: &Tensor, bank: &GaborBank) -> Result<StructurePair> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let vars = extract_on_tape(&mut tape, x, bank)?;
    Ok(vars.to_pair(&tape, bank))
}

/// `(I_t, sin 2θ, cos 2θ)`; doubling the angle removes the 0/π seam.
pub fn encode_orientation(pair: &StructurePair) -> Result<Tensor> {
    let (sin, cos) = doubled_angle(&pair.orientation);
    Tensor::concat_channels(&[&pair.texture, &sin, &cos])
}

pub fn encode_orientation_on_tape(
    tape: &mut Tape,
    vars: &StructureVars,
    bank: &GaborBank,
) -> Result<Var> {
    let (sin, cos) = doubled_angle(&angles(&vars.orientation_index, bank));
    let sin = tape.constant(sin);
    let cos = tape.constant(cos);
    tape.concat(&[vars.texture, sin, cos])
}

fn doubled_angle(orientation: &Tensor) -> (Tensor, Tensor) {
    (
        orientation.map(|t| (2.0 * t).sin()),
        orientation.map(|t| (2.0 * t).cos()),
    )
}

/// Shannon entropy (nats) of the orientation histogram over `bins` angles,
/// restricted to pixels at least `margin` away from the border.
pub fn orientation_entropy(map: &IndexMap, bins: usize, margin: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    let mut total = 0usize;
    for y in margin..map.height.saturating_sub(margin) {
        for x in margin..map.width.saturating_sub(margin) {
            counts[map.get(y, x)] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// A sinusoidal grating of the given wavelength oscillating along `angle`:
/// `0.5 + 0.5 cos(2π (x cos θ + y sin θ) / λ + phase)`.
pub fn grating(size: usize, angle: f64, wavelength: f64, phase: f64) -> Tensor {
    let (s, c) = angle.sin_cos();
    Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        0.5 + 0.5 * (2.0 * PI * (x * c + y * s) / wavelength + phase).cos()
    })
}

/// [`grating`] plus seeded Gaussian noise of standard deviation `sigma`.
pub fn noisy_grating(size: usize, angle: f64, wavelength: f64, sigma: f64, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "noisy-grating", 0);
    let mut g = grating(size, angle, wavelength, 0.0);
    for v in g.data_mut() {
        // Box-Muller; 1 - u keeps the logarithm finite.
        let (u1, u2): (f64, f64) = (r.gen(), r.gen());
        *v += sigma * (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * PI * u2).cos();
    }
    g
}
