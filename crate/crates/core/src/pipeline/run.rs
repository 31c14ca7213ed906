//! Directory-level orchestration: stage ordering, state and config files,
//! and evaluation of a finished checkpoint directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::{BasicGenerator, PatchDiscriminator, Regenerator};

use super::config::{Stage, StageState, Task, TrainConfig};
use super::eval::{evaluate, EvalReport};
use super::train::{
    train_basic, train_joint, train_regen, Context, Prepared, StageOutput, StepLosses,
    StructureSource,
};

pub const STATE_FILE: &str = "state.json";
pub const CONFIG_FILE: &str = "config.json";

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("json.partial");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_state(ckpt_root: &Path) -> Result<StageState> {
    let path = ckpt_root.join(STATE_FILE);
    if !path.exists() {
        return Ok(StageState::default());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    StageState::parse(&text)
}

/// The config last used to train in `ckpt_root`.
pub fn load_config(ckpt_root: &Path) -> Result<TrainConfig> {
    let path = ckpt_root.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    TrainConfig::parse(&text)
}

fn load_split(ctx: &Context, data_dir: &Path, test: bool) -> Result<Vec<Prepared>> {
    let ds = Dataset::open(data_dir)?;
    if ds.manifest.size != ctx.config.image_size {
        return Err(Error::invalid(format!(
            "dataset images are {}px, config expects {}px",
            ds.manifest.size, ctx.config.image_size
        )));
    }
    ctx.prepare_all(&ds.load_split(test)?)
}

fn load_basic(out: &StageOutput, stage: Stage) -> Result<BasicGenerator> {
    let ck = checkpoint::load(out.checkpoint_dir(stage))?;
    Ok(BasicGenerator::from_unet(ck.unet("gb")?))
}

fn load_regen(out: &StageOutput, stage: Stage) -> Result<(Regenerator, PatchDiscriminator)> {
    let ck = checkpoint::load(out.checkpoint_dir(stage))?;
    Ok((
        Regenerator::from_unet(ck.unet("gr")?)?,
        ck.discriminator("dr")?,
    ))
}

/// Runs one stage in `ckpt_root`, which must have completed exactly the
/// stages before it. Returns the per-step losses.
pub fn run_stage(
    config: &TrainConfig,
    data_dir: &Path,
    ckpt_root: &Path,
    stage: Stage,
) -> Result<Vec<StepLosses>> {
    let ctx = Context::new(config.clone())?;
    let mut state = load_state(ckpt_root)?;
    if let Some(task) = state.task {
        if task != config.task {
            return Err(Error::invalid(format!(
                "checkpoint directory holds task {task}, config asks for {}",
                config.task
            )));
        }
    }
    state.check_next(stage)?;
    let data = load_split(&ctx, data_dir, false)?;
    let out = StageOutput::new(ckpt_root)?;
    write_atomic(
        &ckpt_root.join(CONFIG_FILE),
        &serde_json::to_string_pretty(config)?,
    )?;
    let history = match stage {
        Stage::Basic => train_basic(&ctx, &data, &out)?.history,
        Stage::RegenGt => {
            train_regen(&ctx, &data, StructureSource::GroundTruth, None, None, &out)?.history
        }
        Stage::RegenCoarse => {
            let gb = load_basic(&out, Stage::Basic)?;
            let start = load_regen(&out, Stage::RegenGt)?;
            train_regen(
                &ctx,
                &data,
                StructureSource::Coarse,
                Some(&gb),
                Some(start),
                &out,
            )?
            .history
        }
        Stage::Joint => {
            let gb = load_basic(&out, Stage::Basic)?;
            let (gr, dr) = load_regen(&out, Stage::RegenCoarse)?;
            train_joint(&ctx, &data, gb, gr, dr, &out)?.history
        }
    };
    state.task = Some(config.task);
    state.advance(stage, history.len())?;
    write_atomic(
        &ckpt_root.join(STATE_FILE),
        &serde_json::to_string_pretty(&state)?,
    )?;
    Ok(history)
}

/// Runs every stage not yet completed, in order.
pub fn run_remaining(config: &TrainConfig, data_dir: &Path, ckpt_root: &Path) -> Result<()> {
    let done = load_state(ckpt_root)?.completed.len();
    for &stage in &Stage::ORDER[done..] {
        run_stage(config, data_dir, ckpt_root, stage)?;
    }
    Ok(())
}

/// The trained generators of a checkpoint directory: the joint stage if it
/// ran, otherwise the basic and coarse-source re-generation stages.
pub fn load_generators(ckpt_root: &Path) -> Result<(BasicGenerator, Regenerator)> {
    let out = StageOutput::new(ckpt_root)?;
    let joint = out.checkpoint_dir(Stage::Joint);
    if joint.join(checkpoint::MANIFEST).exists() {
        let ck = checkpoint::load(joint)?;
        return Ok((
            BasicGenerator::from_unet(ck.unet("gb")?),
            Regenerator::from_unet(ck.unet("gr")?)?,
        ));
    }
    Ok((
        load_basic(&out, Stage::Basic)?,
        load_regen(&out, Stage::RegenCoarse)?.0,
    ))
}

/// Panel directory written next to a report: `report.json` → `report_panels/`.
pub fn panel_dir(report: &Path) -> PathBuf {
    let stem = report
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    report.with_file_name(format!("{stem}_panels"))
}

/// Evaluates the test split and writes the JSON report plus PNG panels.
pub fn evaluate_dir(
    task: Task,
    ckpt_root: &Path,
    data_dir: &Path,
    report: &Path,
) -> Result<EvalReport> {
    let config = load_config(ckpt_root)?;
    if config.task != task {
        return Err(Error::invalid(format!(
            "checkpoint directory was trained for {}, not {task}",
            config.task
        )));
    }
    let ctx = Context::new(config)?;
    let (gb, gr) = load_generators(ckpt_root)?;
    let samples = load_split(&ctx, data_dir, true)?;
    let result = evaluate(&ctx, &gb, &gr, &samples, Some(&panel_dir(report)))?;
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&result)? + "\n";
    fs::write(report, text).map_err(|e| Error::io(report, e))?;
    Ok(result)
}
