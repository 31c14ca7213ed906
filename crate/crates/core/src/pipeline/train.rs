//! The four training stages.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::losses::{self, FeatureExtractor};
use crate::nn::checkpoint::{self, Architecture, CheckpointMeta};
use crate::nn::{
    BasicGenerator, Bound, DiscConfig, Optimizer, ParamStore, PatchDiscriminator, Regenerator,
};
use crate::rng;
use crate::structure::{self, GaborBank};
use crate::tensor::Tensor;

use super::config::{Stage, Task, TrainConfig};

/// Shared, read-only state of a training or evaluation run.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: TrainConfig,
    pub bank: GaborBank,
    pub extractor: FeatureExtractor,
}

/// One training or test sample with everything the losses need.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: usize,
    /// Input of the basic network.
    pub input: Tensor,
    /// Conditioning image of both discriminators.
    pub condition: Tensor,
    /// Bicubic-upsampled low-resolution input (super-resolution only).
    pub aux: Option<Tensor>,
    pub gt: Tensor,
    pub gt_texture: Tensor,
    pub gt_grams: Vec<Tensor>,
}

impl Context {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            bank: GaborBank::new(config.bank)?,
            extractor: FeatureExtractor::new(config.extractor_seed),
            config,
        })
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn prepare(&self, sample: &Sample) -> Result<Prepared> {
        let task = self.task();
        let size = self.config.image_size;
        if sample.gt.shape() != [3, size, size] {
            return Err(Error::invalid(format!(
                "sample {} is {:?}, config expects {size}x{size}",
                sample.id,
                sample.gt.shape()
            )));
        }
        let (input, aux) = match task {
            Task::Sketch2hair => (sample.sketch.clone(), None),
            Task::HairSr4 => (
                sample.lr4.clone(),
                Some(data::bicubic_upsample(&sample.lr4, 4)?),
            ),
            Task::HairSr8 => (
                sample.lr8.clone(),
                Some(data::bicubic_upsample(&sample.lr8, 8)?),
            ),
        };
        let condition = aux.clone().unwrap_or_else(|| input.clone());
        Ok(Prepared {
            id: sample.id,
            input,
            condition,
            aux,
            gt_texture: losses::texture_map(&sample.gt, &self.bank)?,
            gt_grams: self.extractor.grams(&sample.gt)?,
            gt: sample.gt.clone(),
        })
    }

    pub fn prepare_all(&self, samples: &[Sample]) -> Result<Vec<Prepared>> {
        samples.iter().map(|s| self.prepare(s)).collect()
    }

    fn init_seed(&self, label: &str) -> u64 {
        rng::derive(self.config.seed, label, 0)
    }

    pub fn new_basic(&self) -> Result<BasicGenerator> {
        let c = &self.config;
        BasicGenerator::new(
            c.task.input_channels(),
            c.image_size / c.task.upscale(),
            c.task.upscale(),
            c.base_channels,
            self.init_seed("gb"),
        )
    }

    pub fn new_regenerator(&self) -> Result<Regenerator> {
        let c = &self.config;
        Regenerator::new(
            c.task.uses_aux(),
            c.base_channels,
            c.regen_depth,
            self.init_seed("gr"),
        )
    }

    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig {
            in_channels: 3 + self.task().condition_channels(),
            base_channels: self.config.disc_base_channels,
            layers: self.config.disc_layers,
        }
    }

    pub fn new_discriminator(&self, label: &str) -> Result<PatchDiscriminator> {
        PatchDiscriminator::new(self.disc_config(), self.init_seed(label))
    }

    /// Rejects networks whose architecture differs from what this config
    /// would build.
    pub fn check_basic(&self, gb: &BasicGenerator) -> Result<()> {
        let expect = *self.new_basic()?.unet.config();
        if *gb.unet.config() != expect {
            return Err(Error::invalid(format!(
                "basic network {:?} does not match config {expect:?}",
                gb.unet.config()
            )));
        }
        Ok(())
    }

    pub fn check_regenerator(&self, gr: &Regenerator) -> Result<()> {
        let expect = *self.new_regenerator()?.unet.config();
        if *gr.unet.config() != expect {
            return Err(Error::invalid(format!(
                "re-generator {:?} does not match config {expect:?}",
                gr.unet.config()
            )));
        }
        Ok(())
    }

    pub fn check_discriminator(&self, d: &PatchDiscriminator) -> Result<()> {
        if *d.config() != self.disc_config() {
            return Err(Error::invalid(format!(
                "discriminator {:?} does not match config {:?}",
                d.config(),
                self.disc_config()
            )));
        }
        Ok(())
    }

    /// Basic-network output for one sample.
    pub fn coarse(&self, gb: &BasicGenerator, p: &Prepared) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = gb.unet.params().bind(&mut tape, false);
        let x = tape.constant(p.input.clone());
        let out = gb.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    /// Structure encoding of an image (double application).
    pub fn structure(&self, image: &Tensor) -> Result<Tensor> {
        structure::encode_orientation(&structure::extract(image, &self.bank)?)
    }

    /// Re-generator output given the coarse image.
    pub fn refine(&self, gr: &Regenerator, coarse: &Tensor, p: &Prepared) -> Result<Tensor> {
        let enc = self.structure(coarse)?;
        let mut tape = Tape::new();
        let bound = gr.unet.params().bind(&mut tape, false);
        let c = tape.constant(coarse.clone());
        let s = tape.constant(enc);
        let aux = p.aux.as_ref().map(|a| tape.constant(a.clone()));
        let out = gr.forward(&mut tape, &bound, c, s, aux)?;
        Ok(tape.value(out).clone())
    }

    /// Stand-in for the coarse image while the re-generator learns from
    /// ground-truth structure: the upsampled input for super-resolution, a
    /// 4x box/bicubic blur of the ground truth for sketches.
    pub fn coarse_proxy(&self, p: &Prepared) -> Result<Tensor> {
        match &p.aux {
            Some(a) => Ok(a.clone()),
            None => data::bicubic_upsample(&data::downsample(&p.gt, 4)?, 4),
        }
    }
}

/// Append-only per-stage loss log.
pub struct LossLog {
    out: BufWriter<File>,
    path: PathBuf,
}

pub const CSV_HEADER: &str = "step,pixel,adv,style,fm,total";

impl LossLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = Self {
            out: BufWriter::new(file),
            path,
        };
        log.line(CSV_HEADER)?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn row(&mut self, step: usize, r: &StepLosses) -> Result<()> {
        self.line(&format!(
            "{step},{},{},{},{},{}",
            r.pixel, r.adv, r.style, r.fm, r.total
        ))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Generator losses of one step, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub pixel: f64,
    pub adv: f64,
    pub style: f64,
    pub fm: f64,
    pub total: f64,
    pub disc: f64,
}

impl StepLosses {
    fn add_scaled(&mut self, other: &StepLosses, s: f64) {
        self.pixel += s * other.pixel;
        self.adv += s * other.adv;
        self.style += s * other.style;
        self.fm += s * other.fm;
        self.total += s * other.total;
    }

    fn finite(&self) -> bool {
        [
            self.pixel, self.adv, self.style, self.fm, self.total, self.disc,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Deterministic epoch-shuffled sample order.
struct Schedule {
    seed: u64,
    label: &'static str,
    n: usize,
    epoch: usize,
    order: Vec<usize>,
}

impl Schedule {
    fn new(seed: u64, stage: Stage, n: usize) -> Self {
        Self {
            seed,
            label: stage.name(),
            n,
            epoch: usize::MAX,
            order: Vec::new(),
        }
    }

    fn at(&mut self, k: usize) -> usize {
        let epoch = k / self.n;
        if epoch != self.epoch {
            self.order = (0..self.n).collect();
            self.order
                .shuffle(&mut rng::stream(self.seed, self.label, epoch as u64));
            self.epoch = epoch;
        }
        self.order[k % self.n]
    }

    fn batch(&mut self, step: usize, batch: usize) -> Vec<usize> {
        (0..batch).map(|j| self.at(step * batch + j)).collect()
    }

    /// True if the step completes an epoch.
    fn ends_epoch(&self, step: usize, batch: usize) -> bool {
        (step + 1) * batch / self.n > step * batch / self.n
    }
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>, scale: f64) {
    match acc {
        None => *acc = Some(grads.into_iter().map(|g| g.scaled(scale)).collect()),
        Some(a) => {
            for (x, g) in a.iter_mut().zip(grads) {
                x.add_assign(&g.scaled(scale));
            }
        }
    }
}

fn non_finite(stage: Stage, step: usize) -> Error {
    Error::NonFinite {
        stage: stage.name().to_string(),
        step,
    }
}

/// An update that overflows the stored f32 parameters counts as divergence.
fn apply(
    opt: &mut Optimizer,
    params: &mut ParamStore,
    grads: &[Tensor],
    stage: Stage,
    step: usize,
) -> Result<()> {
    opt.step(params, grads)?;
    if all_finite(params.tensors()) {
        Ok(())
    } else {
        Err(non_finite(stage, step))
    }
}

fn all_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(Tensor::all_finite)
}

/// One discriminator update on (real, fake, condition) triples. Returns the
/// batch-mean loss.
fn disc_update(
    d: &mut PatchDiscriminator,
    opt: &mut Optimizer,
    triples: &[(&Tensor, Tensor, &Tensor)],
    stage: Stage,
    step: usize,
) -> Result<f64> {
    let scale = 1.0 / triples.len() as f64;
    let mut acc = None;
    let mut total = 0.0;
    for (real, fake, cond) in triples {
        let mut tape = Tape::new();
        let bound = d.params().bind(&mut tape, true);
        let r = tape.constant((*real).clone());
        let f = tape.constant(fake.clone());
        let c = tape.constant((*cond).clone());
        let real_out = d.forward(&mut tape, &bound, r, c)?;
        let fake_out = d.forward(&mut tape, &bound, f, c)?;
        let loss = losses::adv_loss_discriminator_logits_on_tape(
            &mut tape,
            real_out.logits,
            fake_out.logits,
        )?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(non_finite(stage, step));
        }
        total += scale * value;
        let grads = tape.backward(loss)?;
        accumulate(&mut acc, bound.gradients(&grads, d.params()), scale);
    }
    let grads = acc.unwrap_or_default();
    if !all_finite(&grads) {
        return Err(non_finite(stage, step));
    }
    apply(opt, d.params_mut(), &grads, stage, step)?;
    Ok(total)
}

/// The four generator terms for a generated image `out`: pixel, adversarial,
/// style and feature matching, in that order.
fn regen_terms(
    ctx: &Context,
    tape: &mut Tape,
    d: &PatchDiscriminator,
    out: Var,
    p: &Prepared,
) -> Result<[Var; 4]> {
    let bound = d.params().bind(tape, false);
    let gt = tape.constant(p.gt.clone());
    let cond = tape.constant(p.condition.clone());
    let fake = d.forward(tape, &bound, out, cond)?;
    let real = d.forward(tape, &bound, gt, cond)?;
    let pixel = losses::pixel_loss_on_tape(tape, out, gt)?;
    let adv = losses::adv_loss_generator_logits_on_tape(tape, fake.logits)?;
    let style = losses::style_loss_to_grams(tape, out, &p.gt_grams, &ctx.extractor)?;
    let fm = losses::fm_loss_on_tape(tape, &real.features, &fake.features)?;
    Ok([pixel, adv, style, fm])
}

fn read_terms(tape: &Tape, terms: &[Var; 4], total: Var) -> Result<StepLosses> {
    Ok(StepLosses {
        pixel: tape.value(terms[0]).item()?,
        adv: tape.value(terms[1]).item()?,
        style: tape.value(terms[2]).item()?,
        fm: tape.value(terms[3]).item()?,
        total: tape.value(total).item()?,
        disc: 0.0,
    })
}

/// Where a stage writes its checkpoint and loss log.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub ckpt_root: PathBuf,
}

impl StageOutput {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let ckpt_root = root.into();
        fs::create_dir_all(&ckpt_root).map_err(|e| Error::io(&ckpt_root, e))?;
        Ok(Self { ckpt_root })
    }

    pub fn checkpoint_dir(&self, stage: Stage) -> PathBuf {
        self.ckpt_root.join(stage.name())
    }

    pub fn csv_path(&self, stage: Stage) -> PathBuf {
        self.ckpt_root.join(format!("losses_{}.csv", stage.name()))
    }
}

fn save_stage(
    ctx: &Context,
    out: &StageOutput,
    stage: Stage,
    step: usize,
    nets: &[(&str, Architecture, &ParamStore)],
) -> Result<()> {
    let meta = CheckpointMeta {
        task: ctx.task().name(),
        stage: stage.name(),
        step,
        seed: ctx.config.seed,
    };
    checkpoint::save(out.checkpoint_dir(stage), &meta, nets)
}

fn gb_entry(gb: &BasicGenerator) -> (&'static str, Architecture, &ParamStore) {
    (
        "gb",
        Architecture::Unet(*gb.unet.config()),
        gb.unet.params(),
    )
}

fn gr_entry(gr: &Regenerator) -> (&'static str, Architecture, &ParamStore) {
    (
        "gr",
        Architecture::Unet(*gr.unet.config()),
        gr.unet.params(),
    )
}

fn d_entry<'a>(
    name: &'static str,
    d: &'a PatchDiscriminator,
) -> (&'static str, Architecture, &'a ParamStore) {
    (name, Architecture::Discriminator(*d.config()), d.params())
}

fn require_data(data: &[Prepared]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    Ok(())
}

pub struct BasicOutcome {
    pub gb: BasicGenerator,
    pub db: PatchDiscriminator,
    pub history: Vec<StepLosses>,
}

/// Trains the basic network and its discriminator on pixel, adversarial and
/// texture losses.
pub fn train_basic(ctx: &Context, data: &[Prepared], out: &StageOutput) -> Result<BasicOutcome> {
    require_data(data)?;
    let stage = Stage::Basic;
    let cfg = &ctx.config;
    let mut gb = ctx.new_basic()?;
    let mut db = ctx.new_discriminator("db")?;
    let mut opt_g = Optimizer::new(cfg.optimizer, cfg.lr(stage));
    let mut opt_d = Optimizer::new(cfg.optimizer, cfg.lr(stage));
    let mut log = LossLog::create(out.csv_path(stage))?;
    let mut sched = Schedule::new(cfg.seed, stage, data.len());
    let steps = cfg.stage_steps.get(stage);
    let w = cfg.weights;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<&Prepared> = sched
            .batch(step, cfg.batch)
            .into_iter()
            .map(|i| &data[i])
            .collect();
        let mut runs = Vec::with_capacity(batch.len());
        for p in &batch {
            let mut tape = Tape::new();
            let bound = gb.unet.params().bind(&mut tape, true);
            let x = tape.constant(p.input.clone());
            let ic = gb.forward(&mut tape, &bound, x)?;
            runs.push((tape, bound, ic));
        }
        let triples: Vec<_> = batch
            .iter()
            .zip(&runs)
            .map(|(p, (tape, _, ic))| (&p.gt, tape.value(*ic).clone(), &p.condition))
            .collect();
        let disc = disc_update(&mut db, &mut opt_d, &triples, stage, step)?;
        let scale = 1.0 / batch.len() as f64;
        let mut acc = None;
        let mut row = StepLosses {
            disc,
            ..Default::default()
        };
        for (p, (mut tape, bound, ic)) in batch.iter().zip(runs) {
            let bd = db.params().bind(&mut tape, false);
            let cond = tape.constant(p.condition.clone());
            let gt = tape.constant(p.gt.clone());
            let logits = db.forward(&mut tape, &bd, ic, cond)?.logits;
            let pixel = losses::pixel_loss_on_tape(&mut tape, ic, gt)?;
            let adv = losses::adv_loss_generator_logits_on_tape(&mut tape, logits)?;
            let mut terms = vec![pixel, adv];
            let mut weights = vec![w.w_pixel, w.w_adv];
            if cfg.texture_weight > 0.0 {
                terms.push(losses::texture_loss_to_map(
                    &mut tape,
                    ic,
                    &p.gt_texture,
                    &ctx.bank,
                )?);
                weights.push(cfg.texture_weight);
            }
            let total = tape.weighted_sum(&terms, &weights)?;
            let r = StepLosses {
                pixel: tape.value(pixel).item()?,
                adv: tape.value(adv).item()?,
                total: tape.value(total).item()?,
                ..Default::default()
            };
            row.add_scaled(&r, scale);
            if !r.finite() {
                log.flush()?;
                return Err(non_finite(stage, step));
            }
            let grads = tape.backward(total)?;
            accumulate(&mut acc, bound.gradients(&grads, gb.unet.params()), scale);
        }
        let grads = acc.unwrap_or_default();
        if !all_finite(&grads) {
            log.flush()?;
            return Err(non_finite(stage, step));
        }
        apply(&mut opt_g, gb.unet.params_mut(), &grads, stage, step)?;
        log.row(step, &row)?;
        history.push(row);
        if sched.ends_epoch(step, cfg.batch) || step + 1 == steps {
            log.flush()?;
            save_stage(
                ctx,
                out,
                stage,
                step + 1,
                &[gb_entry(&gb), d_entry("db", &db)],
            )?;
        }
    }
    Ok(BasicOutcome { gb, db, history })
}

/// Where the re-generator's structure input comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructureSource {
    GroundTruth,
    Coarse,
}

pub struct RegenOutcome {
    pub gr: Regenerator,
    pub dr: PatchDiscriminator,
    pub history: Vec<StepLosses>,
}

/// Trains the re-generator on the four-term objective. With
/// [`StructureSource::Coarse`] the frozen basic network supplies the coarse
/// image and its structure; otherwise the structure comes from the ground
/// truth and the coarse slot holds [`Context::coarse_proxy`].
pub fn train_regen(
    ctx: &Context,
    data: &[Prepared],
    source: StructureSource,
    basic: Option<&BasicGenerator>,
    start: Option<(Regenerator, PatchDiscriminator)>,
    out: &StageOutput,
) -> Result<RegenOutcome> {
    require_data(data)?;
    let stage = match source {
        StructureSource::GroundTruth => Stage::RegenGt,
        StructureSource::Coarse => Stage::RegenCoarse,
    };
    let cfg = &ctx.config;
    let inputs: Vec<(Tensor, Tensor)> = match source {
        StructureSource::GroundTruth => data
            .iter()
            .map(|p| Ok((ctx.coarse_proxy(p)?, ctx.structure(&p.gt)?)))
            .collect::<Result<_>>()?,
        StructureSource::Coarse => {
            let gb = basic
                .ok_or_else(|| Error::invalid("coarse structure source needs a basic network"))?;
            ctx.check_basic(gb)?;
            data.iter()
                .map(|p| {
                    let ic = ctx.coarse(gb, p)?;
                    let s = ctx.structure(&ic)?;
                    Ok((ic, s))
                })
                .collect::<Result<_>>()?
        }
    };
    let (mut gr, mut dr) = match start {
        Some((gr, dr)) => {
            ctx.check_regenerator(&gr)?;
            ctx.check_discriminator(&dr)?;
            (gr, dr)
        }
        None => (ctx.new_regenerator()?, ctx.new_discriminator("dr")?),
    };
    let mut opt_g = Optimizer::new(cfg.optimizer, cfg.lr(stage));
    let mut opt_d = Optimizer::new(cfg.optimizer, cfg.lr(stage));
    let mut log = LossLog::create(out.csv_path(stage))?;
    let mut sched = Schedule::new(cfg.seed, stage, data.len());
    let steps = cfg.stage_steps.get(stage);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let ids = sched.batch(step, cfg.batch);
        let mut runs = Vec::with_capacity(ids.len());
        for &i in &ids {
            let p = &data[i];
            let mut tape = Tape::new();
            let bound = gr.unet.params().bind(&mut tape, true);
            let c = tape.constant(inputs[i].0.clone());
            let s = tape.constant(inputs[i].1.clone());
            let aux = p.aux.as_ref().map(|a| tape.constant(a.clone()));
            let fake = gr.forward(&mut tape, &bound, c, s, aux)?;
            runs.push((tape, bound, fake));
        }
        let triples: Vec<_> = ids
            .iter()
            .zip(&runs)
            .map(|(&i, (tape, _, f))| (&data[i].gt, tape.value(*f).clone(), &data[i].condition))
            .collect();
        let disc = disc_update(&mut dr, &mut opt_d, &triples, stage, step)?;
        let scale = 1.0 / ids.len() as f64;
        let mut acc = None;
        let mut row = StepLosses {
            disc,
            ..Default::default()
        };
        for (&i, (mut tape, bound, fake)) in ids.iter().zip(runs) {
            let terms = regen_terms(ctx, &mut tape, &dr, fake, &data[i])?;
            let total = losses::total_objective_on_tape(&mut tape, terms, &cfg.weights)?;
            let r = read_terms(&tape, &terms, total)?;
            row.add_scaled(&r, scale);
            if !r.finite() {
                log.flush()?;
                return Err(non_finite(stage, step));
            }
            let grads = tape.backward(total)?;
            accumulate(&mut acc, bound.gradients(&grads, gr.unet.params()), scale);
        }
        let grads = acc.unwrap_or_default();
        if !all_finite(&grads) {
            log.flush()?;
            return Err(non_finite(stage, step));
        }
        apply(&mut opt_g, gr.unet.params_mut(), &grads, stage, step)?;
        log.row(step, &row)?;
        history.push(row);
        if sched.ends_epoch(step, cfg.batch) || step + 1 == steps {
            log.flush()?;
            save_stage(
                ctx,
                out,
                stage,
                step + 1,
                &[gr_entry(&gr), d_entry("dr", &dr)],
            )?;
        }
    }
    Ok(RegenOutcome { gr, dr, history })
}

/// Tape handles of one joint forward pass.
pub struct JointPass {
    pub tape: Tape,
    pub gb_bound: Bound,
    pub gr_bound: Bound,
    pub coarse: Var,
    pub refined: Var,
}

/// Runs basic network, structure extraction and re-generator on one tape.
/// With `structure_only` the re-generator sees the coarse image as a
/// constant, so gradients reach the basic network only through the
/// extraction layer.
pub fn joint_forward(
    ctx: &Context,
    gb: &BasicGenerator,
    gr: &Regenerator,
    p: &Prepared,
    structure_only: bool,
) -> Result<JointPass> {
    let mut tape = Tape::new();
    let gb_bound = gb.unet.params().bind(&mut tape, true);
    let gr_bound = gr.unet.params().bind(&mut tape, true);
    let x = tape.constant(p.input.clone());
    let coarse = gb.forward(&mut tape, &gb_bound, x)?;
    let vars = structure::extract_on_tape(&mut tape, coarse, &ctx.bank)?;
    let enc = structure::encode_orientation_on_tape(&mut tape, &vars, &ctx.bank)?;
    let slot = if structure_only {
        tape.constant(tape.value(coarse).clone())
    } else {
        coarse
    };
    let aux = p.aux.as_ref().map(|a| tape.constant(a.clone()));
    let refined = gr.forward(&mut tape, &gr_bound, slot, enc, aux)?;
    Ok(JointPass {
        tape,
        gb_bound,
        gr_bound,
        coarse,
        refined,
    })
}

/// Joint objective: the four-term objective on the refined image plus the
/// basic network's pixel and texture terms on the coarse image.
pub fn joint_objective(
    ctx: &Context,
    pass: &mut JointPass,
    dr: &PatchDiscriminator,
    p: &Prepared,
) -> Result<(Var, StepLosses)> {
    let cfg = &ctx.config;
    let tape = &mut pass.tape;
    let terms = regen_terms(ctx, tape, dr, pass.refined, p)?;
    let gt = tape.constant(p.gt.clone());
    let coarse_pixel = losses::pixel_loss_on_tape(tape, pass.coarse, gt)?;
    let mut all = terms.to_vec();
    let w = cfg.weights;
    let mut weights = vec![w.w_pixel, w.w_adv, w.w_style, w.w_fm, w.w_pixel];
    all.push(coarse_pixel);
    if cfg.texture_weight > 0.0 {
        all.push(losses::texture_loss_to_map(
            tape,
            pass.coarse,
            &p.gt_texture,
            &ctx.bank,
        )?);
        weights.push(cfg.texture_weight);
    }
    let total = tape.weighted_sum(&all, &weights)?;
    let r = read_terms(tape, &terms, total)?;
    Ok((total, r))
}

pub struct JointOutcome {
    pub gb: BasicGenerator,
    pub gr: Regenerator,
    pub dr: PatchDiscriminator,
    pub history: Vec<StepLosses>,
}

/// Fine-tunes both generators together at the reduced learning rate.
pub fn train_joint(
    ctx: &Context,
    data: &[Prepared],
    gb: BasicGenerator,
    gr: Regenerator,
    dr: PatchDiscriminator,
    out: &StageOutput,
) -> Result<JointOutcome> {
    require_data(data)?;
    ctx.check_basic(&gb)?;
    ctx.check_regenerator(&gr)?;
    ctx.check_discriminator(&dr)?;
    let (mut gb, mut gr, mut dr) = (gb, gr, dr);
    let stage = Stage::Joint;
    let cfg = &ctx.config;
    let mut opt_b = Optimizer::new(cfg.optimizer, cfg.lr(stage));
    let mut opt_r = Optimizer::new(cfg.optimizer, cfg.lr(stage));
    let mut opt_d = Optimizer::new(cfg.optimizer, cfg.lr(stage));
    let mut log = LossLog::create(out.csv_path(stage))?;
    let mut sched = Schedule::new(cfg.seed, stage, data.len());
    let steps = cfg.stage_steps.get(stage);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let ids = sched.batch(step, cfg.batch);
        let mut passes = Vec::with_capacity(ids.len());
        for &i in &ids {
            passes.push(joint_forward(ctx, &gb, &gr, &data[i], false)?);
        }
        let triples: Vec<_> = ids
            .iter()
            .zip(&passes)
            .map(|(&i, pass)| {
                (
                    &data[i].gt,
                    pass.tape.value(pass.refined).clone(),
                    &data[i].condition,
                )
            })
            .collect();
        let disc = disc_update(&mut dr, &mut opt_d, &triples, stage, step)?;
        let scale = 1.0 / ids.len() as f64;
        let (mut acc_b, mut acc_r) = (None, None);
        let mut row = StepLosses {
            disc,
            ..Default::default()
        };
        for (&i, mut pass) in ids.iter().zip(passes) {
            let (total, r) = joint_objective(ctx, &mut pass, &dr, &data[i])?;
            row.add_scaled(&r, scale);
            if !r.finite() {
                log.flush()?;
                return Err(non_finite(stage, step));
            }
            let grads = pass.tape.backward(total)?;
            accumulate(
                &mut acc_b,
                pass.gb_bound.gradients(&grads, gb.unet.params()),
                scale,
            );
            accumulate(
                &mut acc_r,
                pass.gr_bound.gradients(&grads, gr.unet.params()),
                scale,
            );
        }
        let (gb_grads, gr_grads) = (acc_b.unwrap_or_default(), acc_r.unwrap_or_default());
        if !all_finite(&gb_grads) || !all_finite(&gr_grads) {
            log.flush()?;
            return Err(non_finite(stage, step));
        }
        apply(&mut opt_b, gb.unet.params_mut(), &gb_grads, stage, step)?;
        apply(&mut opt_r, gr.unet.params_mut(), &gr_grads, stage, step)?;
        log.row(step, &row)?;
        history.push(row);
        if sched.ends_epoch(step, cfg.batch) || step + 1 == steps {
            log.flush()?;
            save_stage(
                ctx,
                out,
                stage,
                step + 1,
                &[gb_entry(&gb), gr_entry(&gr), d_entry("dr", &dr)],
            )?;
        }
    }
    Ok(JointOutcome {
        gb,
        gr,
        dr,
        history,
    })
}
