//! Finite-difference checks of every differentiable op, every loss, the
//! extraction layer and micro-sized networks.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::gradcheck::{check, CheckOptions, CheckReport};
use crate::autodiff::{Tape, Var};
use crate::conv::{conv2d_forward, Padding};
use crate::error::Result;
use crate::losses::{self, FeatureExtractor};
use crate::nn::{Bound, DiscConfig, PatchDiscriminator, Regenerator, UNet, UNetConfig};
use crate::rng;
use crate::structure::{self, BankParams, GaborBank};
use crate::tensor::Tensor;

pub const SUITE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
pub const NETWORK_STEP: f64 = 1e-5;

type Inputs = Box<dyn Fn(&mut rng::Rng) -> Vec<Tensor>>;
type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    inputs: Inputs,
    build: Build,
    tolerance: f64,
    max_probes: Option<usize>,
    step: f64,
    skip_kinks: bool,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: impl Fn(&mut rng::Rng) -> Vec<Tensor> + 'static,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs: Box::new(inputs),
            build: Box::new(build),
            tolerance: OP_TOLERANCE,
            max_probes: None,
            step: CheckOptions::default().step,
            skip_kinks: false,
        }
    }

    /// Skips probes whose step crosses a rectifier or argmax boundary.
    pub fn piecewise(mut self) -> Self {
        self.skip_kinks = true;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    /// Networks are piecewise smooth; a small step and kink detection keep
    /// probes off the rectifier corners.
    fn network(mut self, probes: usize) -> Self {
        self.tolerance = NETWORK_TOLERANCE;
        self.max_probes = Some(probes);
        self.step = NETWORK_STEP;
        self.skip_kinks = true;
        self
    }

    pub fn run(&self, seed: u64) -> Result<CheckReport> {
        let mut r = rng::stream(seed, "gradsuite", 0);
        let inputs = (self.inputs)(&mut r);
        let opts = CheckOptions {
            tolerance: self.tolerance,
            max_probes: self.max_probes,
            seed,
            step: self.step,
            skip_kinks: self.skip_kinks,
            ..CheckOptions::default()
        };
        let mut report = check(
            &format!("{} (seed {seed})", self.name),
            &inputs,
            &self.build,
            &opts,
        )?;
        report.tolerance = self.tolerance;
        Ok(report)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut rng::Rng) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, r)
}

/// Values with magnitude in [0.2, 1], away from the kink at zero.
fn away_from_zero(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let mut t = uniform(shape, 0.2, 1.0, r);
    for v in t.data_mut() {
        if r.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Per pixel, channel values that are a random permutation of levels 0.1
/// apart, so the maximum is unique with a wide margin.
fn separated_channels(k: usize, h: usize, w: usize, r: &mut rng::Rng) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; k * plane];
    let mut levels: Vec<usize> = (0..k).collect();
    for p in 0..plane {
        levels.shuffle(r);
        let base: f64 = r.gen_range(-0.5..0.5);
        for (c, &l) in levels.iter().enumerate() {
            data[c * plane + p] = base + 0.1 * l as f64 + r.gen_range(0.0..0.02);
        }
    }
    Tensor::new(&[k, h, w], data).expect("sized above")
}

/// `Σ out ⊙ weights`, with the weights as the last input.
fn weighted(tape: &mut Tape, out: Var, weights: Var) -> Result<Var> {
    let m = tape.mul(out, weights)?;
    Ok(tape.sum(m))
}

/// A case for an op `f` on inputs of the given shapes; the output is
/// reduced against random weights of shape `out_shape`.
fn op_case(
    name: &str,
    shapes: Vec<Vec<usize>>,
    out_shape: Vec<usize>,
    values: fn(&[usize], &mut rng::Rng) -> Tensor,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    let n = shapes.len();
    GradCase::new(
        name,
        move |r| {
            let mut v: Vec<Tensor> = shapes.iter().map(|s| values(s, r)).collect();
            v.push(uniform(&out_shape, -1.0, 1.0, r));
            v
        },
        move |t, v| {
            let out = f(t, &v[..n])?;
            weighted(t, out, v[n])
        },
    )
}

fn plain(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    uniform(shape, -1.0, 1.0, r)
}

fn positive(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    uniform(shape, 0.5, 2.0, r)
}

fn nonzero(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    away_from_zero(shape, r)
}

/// Values in [-1, 1] at least 0.05 away from ±0.5.
fn clamp_safe(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let mut t = uniform(shape, -1.0, 1.0, r);
    for v in t.data_mut() {
        if (v.abs() - 0.5).abs() < 0.05 {
            *v *= 0.8;
        }
    }
    t
}

pub fn op_cases() -> Vec<GradCase> {
    let s = |d: &[usize]| d.to_vec();
    vec![
        op_case(
            "add",
            vec![s(&[3, 4]), s(&[3, 4])],
            s(&[3, 4]),
            plain,
            |t, v| t.add(v[0], v[1]),
        ),
        op_case(
            "sub",
            vec![s(&[3, 4]), s(&[3, 4])],
            s(&[3, 4]),
            plain,
            |t, v| t.sub(v[0], v[1]),
        ),
        op_case(
            "mul",
            vec![s(&[2, 3, 4]), s(&[2, 3, 4])],
            s(&[2, 3, 4]),
            plain,
            |t, v| t.mul(v[0], v[1]),
        ),
        op_case("scale", vec![s(&[4, 4])], s(&[4, 4]), plain, |t, v| {
            t.scale(v[0], -1.7)
        }),
        op_case("add_scalar", vec![s(&[4, 4])], s(&[4, 4]), plain, |t, v| {
            t.add_scalar(v[0], 0.3)
        }),
        op_case("abs", vec![s(&[3, 4])], s(&[3, 4]), nonzero, |t, v| {
            t.abs(v[0])
        }),
        op_case("square", vec![s(&[3, 4])], s(&[3, 4]), plain, |t, v| {
            t.square(v[0])
        }),
        op_case("log", vec![s(&[3, 4])], s(&[3, 4]), positive, |t, v| {
            t.log(v[0])
        }),
        op_case(
            "leaky_relu",
            vec![s(&[3, 4])],
            s(&[3, 4]),
            nonzero,
            |t, v| t.leaky_relu(v[0], 0.2),
        ),
        op_case("sigmoid", vec![s(&[3, 4])], s(&[3, 4]), plain, |t, v| {
            t.sigmoid(v[0])
        }),
        op_case(
            "log_sigmoid",
            vec![s(&[3, 4])],
            s(&[3, 4]),
            plain,
            |t, v| t.log_sigmoid(v[0]),
        ),
        op_case("clamp", vec![s(&[3, 4])], s(&[3, 4]), clamp_safe, |t, v| {
            t.clamp(v[0], -0.5, 0.5)
        }),
        op_case("sum", vec![s(&[2, 3, 4])], s(&[1]), plain, |t, v| {
            Ok(t.sum(v[0]))
        }),
        op_case("mean", vec![s(&[2, 3, 4])], s(&[1]), plain, |t, v| {
            Ok(t.mean(v[0]))
        }),
        op_case(
            "matmul",
            vec![s(&[3, 4]), s(&[4, 2])],
            s(&[3, 2]),
            plain,
            |t, v| t.matmul(v[0], v[1]),
        ),
        op_case("transpose", vec![s(&[3, 4])], s(&[4, 3]), plain, |t, v| {
            t.transpose(v[0])
        }),
        op_case("reshape", vec![s(&[2, 3, 4])], s(&[4, 6]), plain, |t, v| {
            t.reshape(v[0], &[4, 6])
        }),
        op_case(
            "upsample2",
            vec![s(&[2, 3, 4])],
            s(&[2, 6, 8]),
            plain,
            |t, v| t.upsample2(v[0]),
        ),
        op_case(
            "avg_pool2",
            vec![s(&[2, 4, 4])],
            s(&[2, 2, 2]),
            plain,
            |t, v| t.avg_pool2(v[0]),
        ),
        op_case(
            "concat",
            vec![s(&[2, 3, 4]), s(&[1, 3, 4])],
            s(&[3, 3, 4]),
            plain,
            |t, v| t.concat(&[v[0], v[1]]),
        ),
        op_case(
            "conv2d_zero",
            vec![s(&[2, 4, 4]), s(&[3, 2, 3, 3])],
            s(&[3, 4, 4]),
            plain,
            |t, v| t.conv2d(v[0], v[1], Padding::Zero),
        ),
        op_case(
            "conv2d_reflect",
            vec![s(&[2, 4, 4]), s(&[3, 2, 3, 3])],
            s(&[3, 4, 4]),
            plain,
            |t, v| t.conv2d(v[0], v[1], Padding::Reflect),
        ),
        op_case(
            "add_channel_bias",
            vec![s(&[3, 4, 4]), s(&[3])],
            s(&[3, 4, 4]),
            plain,
            |t, v| t.add_channel_bias(v[0], v[1]),
        ),
        GradCase::new(
            "channel_max",
            |r| {
                vec![
                    separated_channels(4, 3, 4, r),
                    uniform(&[1, 3, 4], -1.0, 1.0, r),
                ]
            },
            |t, v| {
                let m = t.channel_max(v[0])?.values;
                weighted(t, m, v[1])
            },
        ),
        op_case(
            "weighted_sum",
            vec![s(&[3, 4]), s(&[3, 4]), s(&[3, 4])],
            s(&[3, 4]),
            plain,
            |t, v| t.weighted_sum(&[v[0], v[1], v[2]], &[0.5, -1.2, 2.0]),
        ),
    ]
}

fn image(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    uniform(shape, 0.05, 0.95, r)
}

/// An image and a target differing by at least 0.1 everywhere.
fn image_pair(shape: &[usize], r: &mut rng::Rng) -> Vec<Tensor> {
    let a = image(shape, r);
    let b = a.map(|x| if x > 0.5 { x - 0.3 } else { x + 0.3 });
    vec![a, b]
}

pub fn loss_cases() -> Vec<GradCase> {
    vec![
        GradCase::new(
            "pixel_loss",
            |r| image_pair(&[3, 4, 4], r),
            |t, v| losses::pixel_loss_on_tape(t, v[0], v[1]),
        ),
        GradCase::new(
            "adv_loss_generator",
            |r| vec![uniform(&[1, 4, 4], 0.05, 0.95, r)],
            |t, v| losses::adv_loss_generator_on_tape(t, v[0]),
        ),
        GradCase::new(
            "adv_loss_discriminator",
            |r| {
                vec![
                    uniform(&[1, 4, 4], 0.05, 0.95, r),
                    uniform(&[1, 4, 4], 0.05, 0.95, r),
                ]
            },
            |t, v| losses::adv_loss_discriminator_on_tape(t, v[0], v[1]),
        ),
        GradCase::new(
            "adv_loss_generator_logits",
            |r| vec![uniform(&[1, 4, 4], -3.0, 3.0, r)],
            |t, v| losses::adv_loss_generator_logits_on_tape(t, v[0]),
        ),
        GradCase::new(
            "adv_loss_discriminator_logits",
            |r| {
                vec![
                    uniform(&[1, 4, 4], -3.0, 3.0, r),
                    uniform(&[1, 4, 4], -3.0, 3.0, r),
                ]
            },
            |t, v| losses::adv_loss_discriminator_logits_on_tape(t, v[0], v[1]),
        ),
        GradCase::new(
            "gram",
            |r| {
                vec![
                    uniform(&[3, 4, 4], -1.0, 1.0, r),
                    uniform(&[3, 3], -1.0, 1.0, r),
                ]
            },
            |t, v| {
                let g = losses::gram_on_tape(t, v[0])?;
                weighted(t, g, v[1])
            },
        ),
        GradCase::new(
            "style_loss",
            |r| vec![image(&[3, 4, 4], r), image(&[3, 4, 4], r)],
            |t, v| losses::style_loss_on_tape(t, v[0], v[1], &FeatureExtractor::new(7)),
        )
        .piecewise(),
        GradCase::new(
            "fm_loss",
            |r| {
                let mut v = image_pair(&[2, 4, 4], r);
                v.extend(image_pair(&[3, 2, 2], r));
                v
            },
            |t, v| losses::fm_loss_on_tape(t, &[v[0], v[2]], &[v[1], v[3]]),
        ),
        GradCase::new(
            "texture_loss",
            textured_pair,
            |t, v| losses::texture_loss_on_tape(t, v[0], v[1], &bank()),
        ),
        GradCase::new(
            "total_objective",
            |r| (0..4).map(|_| uniform(&[1], 0.0, 2.0, r)).collect(),
            |t, v| {
                let w = losses::LossWeights::default();
                losses::total_objective_on_tape(t, [v[0], v[1], v[2], v[3]], &w)
            },
        ),
    ]
}

fn bank() -> GaborBank {
    GaborBank::new(BankParams::default()).expect("default bank is valid")
}

/// Smallest gap between the largest and second-largest channel.
fn top_gap(responses: &Tensor) -> f64 {
    let (k, h, w) = responses.dims3().expect("rank 3");
    let plane = h * w;
    let d = responses.data();
    (0..plane)
        .map(|p| {
            let mut v: Vec<f64> = (0..k).map(|c| d[c * plane + p]).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v[0] - v[1]
        })
        .fold(f64::INFINITY, f64::min)
}

/// Margin of both applications of the extraction layer on `img`.
fn extraction_margin(img: &Tensor, bank: &GaborBank) -> f64 {
    let lum = structure::luminance(img).expect("1 or 3 channels");
    let f0 = conv2d_forward(&lum, bank.kernels(), Padding::Reflect).expect("valid shapes");
    let (t0, _) = crate::autodiff::channel_argmax(&f0).expect("rank 3");
    let f1 = conv2d_forward(&t0, bank.kernels(), Padding::Reflect).expect("valid shapes");
    top_gap(&f0).min(top_gap(&f1))
}

/// A random 8x8 image whose per-pixel argmax is stable under ±1e-3
/// perturbations of any pixel, in both applications.
fn stable_image(r: &mut rng::Rng, channels: usize) -> Tensor {
    let b = bank();
    loop {
        let img = image(&[channels, 8, 8], r);
        if extraction_margin(&img, &b) > 5e-3 {
            return img;
        }
    }
}

fn textured_pair(r: &mut rng::Rng) -> Vec<Tensor> {
    let b = bank();
    loop {
        let a = stable_image(r, 3);
        let c = stable_image(r, 3);
        let (ta, tc) = (
            losses::texture_map(&a, &b).expect("valid image"),
            losses::texture_map(&c, &b).expect("valid image"),
        );
        let min_diff = ta
            .data()
            .iter()
            .zip(tc.data())
            .map(|(x, y)| (x - y).abs())
            .fold(f64::INFINITY, f64::min);
        if min_diff > 1e-2 {
            return vec![a, c];
        }
    }
}

pub fn structure_cases() -> Vec<GradCase> {
    vec![
        GradCase::new(
            "luminance",
            |r| vec![image(&[3, 4, 4], r), uniform(&[1, 4, 4], -1.0, 1.0, r)],
            |t, v| {
                let l = structure::luminance_on_tape(t, v[0])?;
                weighted(t, l, v[1])
            },
        ),
        GradCase::new(
            "extract_texture_sum",
            |r| vec![stable_image(r, 3)],
            |t, v| {
                let s = structure::extract_on_tape(t, v[0], &bank())?;
                Ok(t.sum(s.texture))
            },
        ),
        GradCase::new(
            "extract_raw_texture_weighted",
            |r| vec![stable_image(r, 1), uniform(&[1, 8, 8], -1.0, 1.0, r)],
            |t, v| {
                let s = structure::extract_on_tape(t, v[0], &bank())?;
                weighted(t, s.raw_texture, v[1])
            },
        ),
    ]
}

fn unet_params(cfg: UNetConfig, seed: u64) -> Vec<Tensor> {
    UNet::new(cfg, seed)
        .expect("valid config")
        .params()
        .tensors()
        .to_vec()
}

pub fn network_cases() -> Vec<GradCase> {
    let gb_cfg = UNetConfig {
        in_channels: 2,
        out_channels: 3,
        base_channels: 4,
        depth: 3,
        extra_up: 0,
    };
    let sr_cfg = UNetConfig {
        in_channels: 3,
        out_channels: 3,
        base_channels: 4,
        depth: 2,
        extra_up: 1,
    };
    let gr_cfg = UNetConfig {
        in_channels: 9,
        out_channels: 3,
        base_channels: 4,
        depth: 2,
        extra_up: 0,
    };
    let d_cfg = DiscConfig {
        in_channels: 5,
        base_channels: 4,
        layers: 3,
    };
    let unet_case = |name: &str, cfg: UNetConfig, in_size: usize, out_size: usize| {
        GradCase::new(
            name,
            move |r| {
                let seed = r.gen();
                let mut v = unet_params(cfg, seed);
                v.push(image(&[cfg.in_channels, in_size, in_size], r));
                v.push(uniform(&[3, out_size, out_size], -1.0, 1.0, r));
                v
            },
            move |t, v| {
                let net = UNet::new(cfg, 0)?;
                let n = net.params().len();
                let bound = Bound(v[..n].to_vec());
                let out = net.forward(t, &bound, v[n])?.output;
                weighted(t, out, v[n + 1])
            },
        )
        .network(8)
    };
    vec![
        unet_case("basic_unet_8x8", gb_cfg, 8, 8),
        unet_case("upsampling_unet_4x4", sr_cfg, 4, 8),
        GradCase::new(
            "regenerator_8x8",
            move |r| {
                let seed = r.gen();
                let mut v = unet_params(gr_cfg, seed);
                v.push(image(&[3, 8, 8], r));
                v.push(image(&[3, 8, 8], r));
                v.push(image(&[3, 8, 8], r));
                v.push(uniform(&[3, 8, 8], -1.0, 1.0, r));
                v
            },
            move |t, v| {
                let net = Regenerator::from_unet(UNet::new(gr_cfg, 0)?)?;
                let n = net.unet.params().len();
                let bound = Bound(v[..n].to_vec());
                let out = net.forward(t, &bound, v[n], v[n + 1], Some(v[n + 2]))?;
                weighted(t, out, v[n + 3])
            },
        )
        .network(8),
        GradCase::new(
            "discriminator_8x8",
            move |r| {
                let seed = r.gen();
                let mut v = PatchDiscriminator::new(d_cfg, seed)
                    .expect("valid")
                    .params()
                    .tensors()
                    .to_vec();
                v.push(image(&[3, 8, 8], r));
                v.push(image(&[3, 8, 8], r));
                v.push(image(&[2, 8, 8], r));
                v
            },
            move |t, v| {
                let d = PatchDiscriminator::new(d_cfg, 0)?;
                let n = d.params().len();
                let bound = Bound(v[..n].to_vec());
                let real = d.forward(t, &bound, v[n], v[n + 2])?;
                let fake = d.forward(t, &bound, v[n + 1], v[n + 2])?;
                let adv =
                    losses::adv_loss_discriminator_logits_on_tape(t, real.logits, fake.logits)?;
                let mut total = adv;
                for (&a, &b) in real.features.iter().zip(&fake.features) {
                    let d = t.sub(a, b)?;
                    let sq = t.square(d)?;
                    let m = t.mean(sq);
                    total = t.add(total, m)?;
                }
                Ok(total)
            },
        )
        .network(8),
    ]
}

/// A square op whose backward rule is off by a constant; the suite must
/// report it as a failure.
pub fn corrupted_case() -> GradCase {
    GradCase::new(
        "corrupted_square",
        |r| vec![uniform(&[3, 4], -1.0, 1.0, r)],
        |t, v| {
            let value = t.value(v[0]).map(|a| a * a);
            let y = t.custom(&[v[0]], value, |ctx| {
                vec![Some(ctx.inputs[0].map(|a| 2.0 * a + 0.05))]
            })?;
            Ok(t.sum(y))
        },
    )
}

pub fn all_cases() -> Vec<GradCase> {
    let mut cases = op_cases();
    cases.extend(loss_cases());
    cases.extend(structure_cases());
    cases.extend(network_cases());
    cases
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub reports: Vec<CheckReport>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(CheckReport::passed)
    }

    pub fn failures(&self) -> Vec<&CheckReport> {
        self.reports.iter().filter(|r| !r.passed()).collect()
    }
}

pub fn run_cases(cases: &[GradCase], seeds: &[u64]) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut reports = Vec::with_capacity(cases.len() * seeds.len());
    for case in cases {
        for &seed in seeds {
            reports.push(case.run(seed)?);
        }
    }
    Ok(SuiteReport {
        reports,
        elapsed: start.elapsed(),
    })
}

/// The full suite over [`SUITE_SEEDS`].
pub fn grad_check_suite() -> Result<SuiteReport> {
    run_cases(&all_cases(), &SUITE_SEEDS)
}
