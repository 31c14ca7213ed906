//! Procedural hair images and the inputs derived from them.
//!
//! A sample is a smooth flow field inside an elliptical region, a set of
//! evenly spaced streamlines traced through it, and an anti-aliased
//! rendering of those streamlines. Sketches and low-resolution inputs are
//! derived from the rendering.

use std::collections::HashSet;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::htx;
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_STROKE_FRACTION: f64 = 0.15;
pub const DEFAULT_STRAND_COUNT: usize = 400;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;
pub const LOW_RES_FACTORS: [usize; 2] = [4, 8];

/// Distance between neighbouring strands, in pixels.
const SEPARATION: f64 = 4.0;
const STEP: f64 = 0.5;
const MIN_STRAND_LEN: f64 = 6.0;

#[derive(Clone, Debug)]
struct FlowParams {
    terms: Vec<(f64, f64, f64, f64)>,
    spread: f64,
    center_x: f64,
    size: f64,
}

impl FlowParams {
    fn random<R: Rng>(size: usize, rng: &mut R) -> Self {
        let terms = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.08..0.25),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(0.3..1.8),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        Self {
            terms,
            spread: rng.gen_range(-0.9..0.9),
            center_x: size as f64 * rng.gen_range(0.4..0.6),
            size: size as f64,
        }
    }

    /// Strand direction at a continuous pixel position, in `[0, π)`.
    fn angle(&self, x: f64, y: f64) -> f64 {
        let mut a = FRAC_PI_2 + self.spread * (x - self.center_x) / self.size;
        for &(amp, fx, fy, phase) in &self.terms {
            a += amp * (2.0 * PI * (fx * x + fy * y) / self.size + phase).sin();
        }
        a.rem_euclid(PI)
    }
}

#[derive(Clone, Debug)]
struct Region {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    wobble: f64,
    phase: f64,
}

impl Region {
    fn random<R: Rng>(size: usize, rng: &mut R) -> Self {
        let s = size as f64;
        Self {
            cx: s * rng.gen_range(0.45..0.55),
            cy: s * rng.gen_range(0.42..0.55),
            rx: s * rng.gen_range(0.3..0.42),
            ry: s * rng.gen_range(0.34..0.44),
            wobble: rng.gen_range(0.0..0.08),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        let r = 1.0 + self.wobble * (3.0 * dy.atan2(dx) + self.phase).sin();
        dx * dx + dy * dy <= r * r
    }
}

/// A rendered synthetic hair sample with its generating flow.
#[derive(Clone, Debug)]
pub struct HairField {
    pub seed: u64,
    pub size: usize,
    /// Strand direction per pixel, `1×H×W`, angles in `[0, π)`.
    pub flow: Tensor,
    /// 1 inside the hair region, `1×H×W`.
    pub mask: Tensor,
    /// Polylines of `(x, y)` points in pixel coordinates.
    pub strands: Vec<Vec<(f64, f64)>>,
    /// `3×H×W` image in `[0, 1]`.
    pub rendered: Tensor,
}

struct Occupancy {
    cell: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<(f64, f64, usize)>>,
}

impl Occupancy {
    fn new(size: usize, cell: f64) -> Self {
        let n = (size as f64 / cell).ceil() as usize + 1;
        Self {
            cell,
            cols: n,
            rows: n,
            cells: vec![Vec::new(); n * n],
        }
    }

    fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (cx, cy) = ((x / self.cell).floor(), (y / self.cell).floor());
        (cx >= 0.0 && cy >= 0.0 && (cx as usize) < self.cols && (cy as usize) < self.rows)
            .then_some((cx as usize, cy as usize))
    }

    fn insert(&mut self, x: f64, y: f64, id: usize) {
        if let Some((cx, cy)) = self.cell_of(x, y) {
            self.cells[cy * self.cols + cx].push((x, y, id));
        }
    }

    /// True if a point of a strand other than `own` lies within `radius`.
    fn occupied(&self, x: f64, y: f64, radius: f64, own: usize) -> bool {
        let Some((cx, cy)) = self.cell_of(x, y) else {
            return true;
        };
        let reach = (radius / self.cell).ceil() as usize;
        let r2 = radius * radius;
        for gy in cy.saturating_sub(reach)..=(cy + reach).min(self.rows - 1) {
            for gx in cx.saturating_sub(reach)..=(cx + reach).min(self.cols - 1) {
                for &(px, py, id) in &self.cells[gy * self.cols + gx] {
                    if id != own && (px - x).powi(2) + (py - y).powi(2) < r2 {
                        return true;
                    }
                }
            }
        }
        false
    }
}

fn direction(flow: &FlowParams, x: f64, y: f64, prev: (f64, f64)) -> (f64, f64) {
    let (s, c) = flow.angle(x, y).sin_cos();
    if c * prev.0 + s * prev.1 < 0.0 {
        (-c, -s)
    } else {
        (c, s)
    }
}

fn trace_half(
    flow: &FlowParams,
    region: &Region,
    occ: &Occupancy,
    start: (f64, f64),
    heading: (f64, f64),
    id: usize,
    max_steps: usize,
) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    let (mut x, mut y) = start;
    let mut d = heading;
    for _ in 0..max_steps {
        let d1 = direction(flow, x, y, d);
        let (mx, my) = (x + 0.5 * STEP * d1.0, y + 0.5 * STEP * d1.1);
        let d2 = direction(flow, mx, my, d1);
        let (nx, ny) = (x + STEP * d2.0, y + STEP * d2.1);
        if !region.contains(nx, ny) || occ.occupied(nx, ny, 0.5 * SEPARATION, id) {
            break;
        }
        pts.push((nx, ny));
        x = nx;
        y = ny;
        d = d2;
    }
    pts
}

fn trace(
    flow: &FlowParams,
    region: &Region,
    occ: &Occupancy,
    seed: (f64, f64),
    id: usize,
    size: usize,
) -> Vec<(f64, f64)> {
    let (s, c) = flow.angle(seed.0, seed.1).sin_cos();
    let max_steps = size / 2;
    let mut back = trace_half(flow, region, occ, seed, (-c, -s), id, max_steps);
    let fwd = trace_half(flow, region, occ, seed, (c, s), id, max_steps);
    back.reverse();
    back.push(seed);
    back.extend(fwd);
    back
}

fn polyline_length(pts: &[(f64, f64)]) -> f64 {
    pts.windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .sum()
}

/// Evenly spaced streamlines: each accepted strand proposes new seeds one
/// separation away on either side, with random seeds as a fallback.
fn place_strands<R: Rng>(
    flow: &FlowParams,
    region: &Region,
    size: usize,
    strand_count: usize,
    rng: &mut R,
) -> Vec<Vec<(f64, f64)>> {
    let mut occ = Occupancy::new(size, SEPARATION);
    let mut strands: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut queue: Vec<(f64, f64)> = Vec::new();
    let mut random_tries = 0usize;
    let max_random = 60 * size;
    while strands.len() < strand_count {
        let candidate = match queue.pop() {
            Some(p) => p,
            None => {
                if random_tries >= max_random {
                    break;
                }
                random_tries += 1;
                (
                    rng.gen_range(0.0..size as f64),
                    rng.gen_range(0.0..size as f64),
                )
            }
        };
        let id = strands.len();
        if !region.contains(candidate.0, candidate.1)
            || occ.occupied(candidate.0, candidate.1, SEPARATION * 0.95, id)
        {
            continue;
        }
        let pts = trace(flow, region, &occ, candidate, id, size);
        if polyline_length(&pts) < MIN_STRAND_LEN {
            continue;
        }
        for &(x, y) in &pts {
            occ.insert(x, y, id);
        }
        let n = pts.len();
        for (tip, inner) in [(pts[0], pts[1]), (pts[n - 1], pts[n - 2])] {
            let (dx, dy) = (tip.0 - inner.0, tip.1 - inner.1);
            let len = (dx * dx + dy * dy).sqrt();
            queue.push((tip.0 + SEPARATION * dx / len, tip.1 + SEPARATION * dy / len));
        }
        for (i, &(x, y)) in pts.iter().enumerate().rev() {
            if i % 4 != 0 {
                continue;
            }
            let (s, c) = flow.angle(x, y).sin_cos();
            queue.push((x - s * SEPARATION, y + c * SEPARATION));
            queue.push((x + s * SEPARATION, y - c * SEPARATION));
        }
        strands.push(pts);
    }
    strands
}

const PALETTE: [[f64; 3]; 5] = [
    [0.95, 0.80, 0.55],
    [0.70, 0.46, 0.26],
    [0.50, 0.33, 0.20],
    [0.82, 0.50, 0.30],
    [0.62, 0.60, 0.58],
];

fn distance_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt()
}

fn render<R: Rng>(size: usize, mask: &Tensor, strands: &[Vec<(f64, f64)>], rng: &mut R) -> Tensor {
    let mut strand_map = vec![0.0f64; size * size];
    for pts in strands {
        let brightness = rng.gen_range(0.55..1.0);
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let x0 = (a.0.min(b.0) - 2.0).floor().max(0.0) as usize;
            let x1 = ((a.0.max(b.0) + 2.0).ceil() as usize).min(size - 1);
            let y0 = (a.1.min(b.1) - 2.0).floor().max(0.0) as usize;
            let y1 = ((a.1.max(b.1) + 2.0).ceil() as usize).min(size - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = distance_to_segment(x as f64, y as f64, a, b);
                    let v = brightness * (1.2 - d).clamp(0.0, 1.0);
                    let cell = &mut strand_map[y * size + x];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
    let base = PALETTE[rng.gen_range(0..PALETTE.len())];
    let jitter = rng.gen_range(0.85..1.1);
    let tone: Vec<f64> = base.iter().map(|c| (c * jitter).min(1.0)).collect();
    let background = rng.gen_range(0.03..0.1);
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        let y = (p / size) as f64 / size as f64;
        let shade = 1.05 - 0.3 * y;
        for c in 0..3 {
            let v = if mask.data()[p] > 0.5 {
                tone[c] * (0.12 + 0.88 * strand_map[p]) * shade
            } else {
                background * (1.0 - 0.3 * y)
            };
            out[c * plane + p] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::from_parts(vec![3, size, size], out)
}

fn check_size(size: usize) -> Result<()> {
    if !size.is_power_of_two() || !(16..=1024).contains(&size) {
        return Err(Error::invalid(format!(
            "image size {size} must be a power of two in [16, 1024]"
        )));
    }
    Ok(())
}

pub fn synth_ground_truth(seed: u64, size: usize, strand_count: usize) -> Result<HairField> {
    check_size(size)?;
    if strand_count == 0 {
        return Err(Error::invalid("strand count must be at least 1"));
    }
    let mut r = rng::stream(seed, "hair-field", 0);
    let flow_params = FlowParams::random(size, &mut r);
    let region = Region::random(size, &mut r);
    let flow = Tensor::from_fn(&[1, size, size], |i| {
        flow_params.angle((i % size) as f64, (i / size) as f64)
    });
    let mask = Tensor::from_fn(&[1, size, size], |i| {
        f64::from(u8::from(
            region.contains((i % size) as f64, (i / size) as f64),
        ))
    });
    let strands = place_strands(&flow_params, &region, size, strand_count, &mut r);
    let rendered = render(size, &mask, &strands, &mut r);
    Ok(HairField {
        seed,
        size,
        flow,
        mask,
        strands,
        rendered,
    })
}

/// Pixels a 1-pixel-wide rasterization of the polyline touches.
pub fn rasterize(pts: &[(f64, f64)], size: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut push = |x: f64, y: f64| {
        let (xi, yi) = (x.round(), y.round());
        if xi >= 0.0 && yi >= 0.0 && (xi as usize) < size && (yi as usize) < size {
            let idx = yi as usize * size + xi as usize;
            if out.last() != Some(&idx) {
                out.push(idx);
            }
        }
    };
    for w in pts.windows(2) {
        let len = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        let n = (len / 0.25).ceil().max(1.0) as usize;
        for i in 0..n {
            let t = i as f64 / n as f64;
            push(
                w[0].0 + t * (w[1].0 - w[0].0),
                w[0].1 + t * (w[1].1 - w[0].1),
            );
        }
    }
    if let Some(&(x, y)) = pts.last() {
        push(x, y);
    }
    out
}

/// Two-channel sketch: the region mask (1 inside) and a stroke channel that
/// is 0 on stroke pixels and 1 elsewhere. Strands are drawn in random order
/// while their rasterized length stays within `stroke_fraction` of the total
/// strand length; at least one strand is always drawn.
pub fn derive_sketch(field: &HairField, stroke_fraction: f64) -> Result<Tensor> {
    if !(stroke_fraction > 0.0 && stroke_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "stroke fraction {stroke_fraction} outside (0, 1]"
        )));
    }
    let size = field.size;
    let plane = size * size;
    let rasters: Vec<Vec<usize>> = field
        .strands
        .iter()
        .map(|s| {
            let mut px = rasterize(s, size);
            px.retain(|&p| field.mask.data()[p] > 0.5);
            px
        })
        .collect();
    let total: usize = rasters.iter().map(Vec::len).sum();
    let budget = stroke_fraction * total as f64;
    let mut order: Vec<usize> = (0..rasters.len()).collect();
    order.shuffle(&mut rng::stream(field.seed, "sketch", 0));
    let mut data = vec![1.0; 2 * plane];
    data[..plane].copy_from_slice(field.mask.data());
    let mut used = 0usize;
    for (k, &s) in order.iter().enumerate() {
        let len = rasters[s].len();
        if k > 0 && (used + len) as f64 > budget {
            continue;
        }
        used += len;
        for &p in &rasters[s] {
            data[plane + p] = 0.0;
        }
    }
    Ok(Tensor::from_parts(vec![2, size, size], data))
}

/// Box-filter downsampling by an integer factor.
pub fn downsample(image: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let src = image.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = (ch * h + y * factor + dy) * w + x * factor;
                    acc += src[row..row + factor].iter().sum::<f64>();
                }
                out[(ch * oh + y) * ow + x] = acc * norm;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Low-resolution input for the super-resolution task.
pub fn downsample_input(field: &HairField, factor: usize) -> Result<Tensor> {
    if !LOW_RES_FACTORS.contains(&factor) {
        return Err(Error::invalid(format!(
            "downsampling factor must be 4 or 8, got {factor}"
        )));
    }
    downsample(&field.rendered, factor)
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let i = base as isize - 1 + k as isize;
                *tap = (
                    i.clamp(0, n_in as isize - 1) as usize,
                    cubic_weight(src - i as f64),
                );
            }
            taps
        })
        .collect()
}

/// Separable bicubic (Keys, a = −0.5) upsampling with clamped borders; the
/// result is clamped to `[0, 1]`.
pub fn bicubic_upsample(image: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let tx = cubic_taps(w, ow);
    let ty = cubic_taps(h, oh);
    let src = image.data();
    let mut rows = vec![0.0; c * h * ow];
    for ch in 0..c {
        for y in 0..h {
            let line = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (x, taps) in tx.iter().enumerate() {
                rows[(ch * h + y) * ow + x] = taps.iter().map(|&(i, wt)| line[i] * wt).sum();
            }
        }
    }
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..ow {
                let v: f64 = taps
                    .iter()
                    .map(|&(i, wt)| rows[(ch * h + i) * ow + x] * wt)
                    .sum();
                out[(ch * oh + y) * ow + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Quantizes to 8 bits, as an image file would.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn write_png(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = image.dims3()?;
    if c != 1 && c != 3 {
        return Err(Error::shape(format!(
            "PNG export needs 1 or 3 channels, got {c}"
        )));
    }
    let plane = h * w;
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            buf.push(to_u8(image.data()[(ch % c) * plane + p]));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::shape("PNG buffer size mismatch"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = f64::from(px.0[ch]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub size: usize,
    pub count: usize,
    pub strand_count: usize,
    pub stroke_fraction: f64,
    pub split_ratio: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const DATASET_FORMAT: &str = "hairsynth-dataset-v1";

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != DATASET_FORMAT {
            return Err(Error::Format(format!(
                "unknown dataset format {:?}",
                self.format
            )));
        }
        check_size(self.size).map_err(|e| Error::Format(e.to_string()))?;
        if self.count > 100_000 {
            return Err(Error::Format(format!(
                "dataset count {} too large",
                self.count
            )));
        }
        if !(self.stroke_fraction > 0.0 && self.stroke_fraction <= 1.0)
            || !(self.split_ratio > 0.0 && self.split_ratio < 1.0)
        {
            return Err(Error::Format(
                "stroke fraction or split ratio out of range".into(),
            ));
        }
        let mut seen = HashSet::new();
        for &id in self.train.iter().chain(&self.test) {
            if id >= self.count || !seen.insert(id) {
                return Err(Error::Format(format!(
                    "sample id {id} out of range or repeated"
                )));
            }
        }
        if seen.len() != self.count {
            return Err(Error::Format("splits do not cover the dataset".into()));
        }
        Ok(())
    }
}

/// Deterministic shuffled split; the train side gets `round(count·ratio)`.
pub fn split(seed: u64, count: usize, ratio: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if count < 5 {
        return Err(Error::invalid(format!(
            "a dataset needs at least 5 samples, got {count}"
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut rng::stream(seed, "split", 0));
    let n_train = ((count as f64 * ratio).round() as usize).clamp(1, count - 1);
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub strand_count: usize,
    pub stroke_fraction: f64,
    pub split_ratio: f64,
}

impl DatasetSpec {
    pub fn new(seed: u64, count: usize, size: usize) -> Self {
        Self {
            seed,
            count,
            size,
            strand_count: DEFAULT_STRAND_COUNT,
            stroke_fraction: DEFAULT_STROKE_FRACTION,
            split_ratio: DEFAULT_SPLIT_RATIO,
        }
    }
}

/// One sample as stored on disk and read back for training.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub gt: Tensor,
    pub sketch: Tensor,
    pub lr4: Tensor,
    pub lr8: Tensor,
}

fn sample_seed(seed: u64, id: usize) -> u64 {
    rng::derive(seed, "sample", id as u64)
}

fn generate_sample(spec: &DatasetSpec, id: usize) -> Result<Sample> {
    let field = synth_ground_truth(sample_seed(spec.seed, id), spec.size, spec.strand_count)?;
    let gt = quantize(&field.rendered);
    let sketch = derive_sketch(&field, spec.stroke_fraction)?;
    Ok(Sample {
        id,
        lr4: quantize(&downsample(&gt, 4)?),
        lr8: quantize(&downsample(&gt, 8)?),
        gt,
        sketch,
    })
}

pub fn sample_name(id: usize) -> String {
    format!("{id:04}")
}

/// Generates the dataset into `dir` and returns its manifest.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    check_size(spec.size)?;
    let (train, test) = split(spec.seed, spec.count, spec.split_ratio)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        seed: spec.seed,
        size: spec.size,
        count: spec.count,
        strand_count: spec.strand_count,
        stroke_fraction: spec.stroke_fraction,
        split_ratio: spec.split_ratio,
        train,
        test,
    };
    manifest.validate()?;
    for sub in ["gt", "sketch", "lr4", "lr8"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    (0..spec.count)
        .into_par_iter()
        .try_for_each(|id| -> Result<()> {
            let s = generate_sample(spec, id)?;
            let name = sample_name(id);
            write_png(dir.join("gt").join(format!("{name}.png")), &s.gt)?;
            htx::write(dir.join("sketch").join(format!("{name}.htx")), &s.sketch)?;
            write_png(dir.join("lr4").join(format!("{name}.png")), &s.lr4)?;
            write_png(dir.join("lr8").join(format!("{name}.png")), &s.lr8)
        })?;
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            manifest: DatasetManifest::parse(&text)?,
            root,
        })
    }

    pub fn load(&self, id: usize) -> Result<Sample> {
        let name = sample_name(id);
        let size = self.manifest.size;
        let sample = Sample {
            id,
            gt: read_png(self.root.join("gt").join(format!("{name}.png")))?,
            sketch: htx::read(self.root.join("sketch").join(format!("{name}.htx")))?,
            lr4: read_png(self.root.join("lr4").join(format!("{name}.png")))?,
            lr8: read_png(self.root.join("lr8").join(format!("{name}.png")))?,
        };
        let expect = [
            (&sample.gt, [3, size, size]),
            (&sample.sketch, [2, size, size]),
            (&sample.lr4, [3, size / 4, size / 4]),
            (&sample.lr8, [3, size / 8, size / 8]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "sample {name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(sample)
    }

    pub fn load_split(&self, test: bool) -> Result<Vec<Sample>> {
        let ids = if test {
            &self.manifest.test
        } else {
            &self.manifest.train
        };
        ids.iter().map(|&id| self.load(id)).collect()
    }
}
