use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{BasicGenerator, Regenerator};
use crate::tensor::Tensor;

use super::config::Task;
use super::train::{Context, Prepared};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub pixel: f64,
    pub texture: f64,
    pub texture_per_pixel: f64,
    pub style: f64,
}

impl ImageMetrics {
    fn add_scaled(&mut self, o: &ImageMetrics, s: f64) {
        self.pixel += s * o.pixel;
        self.texture += s * o.texture;
        self.texture_per_pixel += s * o.texture_per_pixel;
        self.style += s * o.style;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: usize,
    pub coarse: ImageMetrics,
    pub refined: ImageMetrics,
    /// The bicubic-upsampled input, for super-resolution tasks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ImageMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub split: String,
    pub count: usize,
    pub mean_coarse: ImageMetrics,
    pub mean_refined: ImageMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_baseline: Option<ImageMetrics>,
    pub images: Vec<ImageReport>,
}

/// Pixel, texture and style losses of `output` against the sample's ground
/// truth.
pub fn metrics(ctx: &Context, output: &Tensor, p: &Prepared) -> Result<ImageMetrics> {
    let pixel = losses::pixel_loss(output, &p.gt)?;
    let tex = losses::texture_map(output, &ctx.bank)?;
    let texture: f64 = tex
        .data()
        .iter()
        .zip(p.gt_texture.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    let style = losses::style_loss(output, &p.gt, &ctx.extractor)?;
    Ok(ImageMetrics {
        pixel,
        texture,
        texture_per_pixel: texture / tex.len() as f64,
        style,
    })
}

/// Visualizes the task input at output resolution.
fn input_panel(p: &Prepared) -> Result<Tensor> {
    match &p.aux {
        Some(a) => Ok(a.clone()),
        None => {
            let (_, h, w) = p.input.dims3()?;
            let plane = h * w;
            let d = p.input.data();
            let gray: Vec<f64> = (0..plane)
                .map(|i| match (d[i] > 0.5, d[plane + i] > 0.5) {
                    (true, false) => 0.0,
                    (true, true) => 1.0,
                    (false, _) => 0.25,
                })
                .collect();
            Tensor::new(&[1, h, w], gray)
        }
    }
}

fn to_rgb(t: &Tensor) -> Result<Tensor> {
    let (c, _, _) = t.dims3()?;
    if c == 3 {
        Ok(t.clone())
    } else {
        Tensor::concat_channels(&[t, t, t])
    }
}

/// Places equally sized images side by side.
pub fn side_by_side(images: &[Tensor]) -> Result<Tensor> {
    let rgb: Vec<Tensor> = images.iter().map(to_rgb).collect::<Result<_>>()?;
    let (_, h, w) = rgb
        .first()
        .ok_or_else(|| Error::invalid("no images"))?
        .dims3()?;
    let n = rgb.len();
    let mut out = vec![0.0; 3 * h * w * n];
    for (k, img) in rgb.iter().enumerate() {
        if img.shape() != [3, h, w] {
            return Err(Error::shape("panel images differ in size"));
        }
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let dst = (c * h + y) * w * n + k * w;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(&[3, h, w * n], out)
}

/// Scores the coarse and refined outputs on `samples`; with `panels` set,
/// writes `input | coarse | refined | ground truth` PNGs there.
pub fn evaluate(
    ctx: &Context,
    gb: &BasicGenerator,
    gr: &Regenerator,
    samples: &[Prepared],
    panels: Option<&Path>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    ctx.check_basic(gb)?;
    ctx.check_regenerator(gr)?;
    if let Some(dir) = panels {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut images = Vec::with_capacity(samples.len());
    for p in samples {
        let coarse = ctx.coarse(gb, p)?;
        let refined = ctx.refine(gr, &coarse, p)?;
        let baseline = p.aux.as_ref().map(|a| metrics(ctx, a, p)).transpose()?;
        images.push(ImageReport {
            id: p.id,
            coarse: metrics(ctx, &coarse, p)?,
            refined: metrics(ctx, &refined, p)?,
            baseline,
        });
        if let Some(dir) = panels {
            let panel = side_by_side(&[input_panel(p)?, coarse, refined, p.gt.clone()])?;
            data::write_png(dir.join(format!("{}.png", data::sample_name(p.id))), &panel)?;
        }
    }
    let s = 1.0 / images.len() as f64;
    let mut mean_coarse = ImageMetrics::default();
    let mut mean_refined = ImageMetrics::default();
    let mut mean_baseline = ctx.task().uses_aux().then(ImageMetrics::default);
    for r in &images {
        mean_coarse.add_scaled(&r.coarse, s);
        mean_refined.add_scaled(&r.refined, s);
        if let (Some(m), Some(b)) = (mean_baseline.as_mut(), r.baseline.as_ref()) {
            m.add_scaled(b, s);
        }
    }
    Ok(EvalReport {
        task: ctx.task(),
        split: "test".into(),
        count: images.len(),
        mean_coarse,
        mean_refined,
        mean_baseline,
        images,
    })
}
