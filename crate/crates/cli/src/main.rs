use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};

use hairsynth::data::{self, DatasetSpec};
use hairsynth::htx;
use hairsynth::pipeline::{self, gradsuite, Stage, Task, TrainConfig};
use hairsynth::structure::{self, BankParams, GaborBank};
use hairsynth::Tensor;

#[derive(Parser)]
#[command(
    name = "hairsynth",
    version,
    about = "Gabor structure extraction and two-phase hair synthesis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural dataset of hair images, sketches and low-resolution inputs.
    SynthData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract texture and orientation maps from a PNG.
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with Gabor bank parameters; defaults are used when omitted.
        #[arg(long)]
        bank_params: Option<PathBuf>,
    },
    /// Write the Gabor kernels as HTX tensors and PNG tiles.
    DumpKernels {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bank_params: Option<PathBuf>,
    },
    /// Run one training stage, or `all` remaining stages.
    Train {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        stage: StageArg,
        /// JSON training config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
    },
    /// Score a trained checkpoint directory on the test split.
    Eval {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare every backward rule against central finite differences.
    GradCheck {
        /// Add a case with a deliberately wrong backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, Debug)]
enum StageArg {
    One(Stage),
    All,
}

impl std::str::FromStr for StageArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(StageArg::All);
        }
        s.parse()
            .map(StageArg::One)
            .map_err(|e: hairsynth::Error| e.to_string())
    }
}

/// The gradient suite found a mismatch.
#[derive(Debug)]
struct GradCheckFailed(usize);

impl std::fmt::Display for GradCheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient check(s) failed", self.0)
    }
}

impl std::error::Error for GradCheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<GradCheckFailed>().is_some() {
        return 2;
    }
    match e.downcast_ref::<hairsynth::Error>() {
        Some(err) if err.is_numerical() => 2,
        _ => 1,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData {
            seed,
            count,
            size,
            out,
        } => {
            let manifest = data::write_dataset(&out, &DatasetSpec::new(seed, count, size))?;
            println!(
                "wrote {} samples ({} train, {} test) at {size}x{size} to {}",
                manifest.count,
                manifest.train.len(),
                manifest.test.len(),
                out.display()
            );
        }
        Command::Extract {
            input,
            out,
            bank_params,
        } => extract(&input, &out, bank_params.as_deref())?,
        Command::DumpKernels { out, bank_params } => dump_kernels(&out, bank_params.as_deref())?,
        Command::Train {
            task,
            stage,
            config,
            data,
            ckpt_dir,
        } => {
            let config = load_config(config.as_deref(), task)?;
            match stage {
                StageArg::One(s) => train_one(&config, &data, &ckpt_dir, s)?,
                StageArg::All => {
                    let done = pipeline::load_state(&ckpt_dir)?.completed.len();
                    for &s in &Stage::ORDER[done..] {
                        train_one(&config, &data, &ckpt_dir, s)?;
                    }
                }
            }
        }
        Command::Eval {
            task,
            ckpt_dir,
            data,
            report,
        } => {
            let r = pipeline::evaluate_dir(task, &ckpt_dir, &data, &report)?;
            println!("{} test images", r.count);
            for (label, m) in [
                ("coarse", Some(&r.mean_coarse)),
                ("refined", Some(&r.mean_refined)),
                ("bicubic", r.mean_baseline.as_ref()),
            ] {
                if let Some(m) = m {
                    println!(
                        "{label:>8}: pixel {:.5}  texture {:.3}  style {:.3e}",
                        m.pixel, m.texture, m.style
                    );
                }
            }
            println!("report written to {}", report.display());
        }
        Command::GradCheck { inject_fault } => {
            let mut cases = gradsuite::all_cases();
            if inject_fault {
                cases.push(gradsuite::corrupted_case());
            }
            let suite = gradsuite::run_cases(&cases, &gradsuite::SUITE_SEEDS)?;
            for r in &suite.reports {
                let status = if r.passed() { "ok  " } else { "FAIL" };
                let kinks = if r.skipped > 0 {
                    format!("  ({} of {} probes on kinks)", r.skipped, r.probed)
                } else {
                    String::new()
                };
                println!(
                    "{status} {:<44} {:.2e} / {:.0e}{kinks}",
                    r.name,
                    r.max_error(),
                    r.tolerance
                );
            }
            let failed = suite.failures().len();
            println!(
                "{} checks in {:.1}s",
                suite.reports.len(),
                suite.elapsed.as_secs_f64()
            );
            if failed > 0 {
                return Err(GradCheckFailed(failed).into());
            }
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>, task: Task) -> Result<TrainConfig> {
    let Some(path) = path else {
        let config = TrainConfig {
            task,
            ..TrainConfig::default()
        };
        return Ok(config);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(hairsynth::Error::from)?;
    let mut config = TrainConfig::parse(&text)?;
    if raw.get("task").is_some() && config.task != task {
        return Err(hairsynth::Error::InvalidArgument(format!(
            "--task {task} conflicts with task {} in {}",
            config.task,
            path.display()
        ))
        .into());
    }
    config.task = task;
    Ok(config)
}

fn train_one(config: &TrainConfig, data: &Path, ckpt_dir: &Path, stage: Stage) -> Result<()> {
    let history = pipeline::run_stage(config, data, ckpt_dir, stage)?;
    if let Some(last) = history.last() {
        println!(
            "{stage}: {} steps, final total {:.4} (pixel {:.4}, adv {:.4})",
            history.len(),
            last.total,
            last.pixel,
            last.adv
        );
    }
    Ok(())
}

fn load_bank(path: Option<&Path>) -> Result<GaborBank> {
    let params = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<BankParams>(&text).map_err(hairsynth::Error::from)?
        }
        None => BankParams::default(),
    };
    Ok(GaborBank::new(params)?)
}

/// Stretches to [0, 1]; a constant map becomes black.
fn normalize(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    let span = hi - lo;
    if span > 0.0 {
        t.map(|v| (v - lo) / span)
    } else {
        t.map(|_| 0.0)
    }
}

/// Maps zero to mid gray, keeping the sign visible.
fn signed_gray(t: &Tensor) -> Tensor {
    let m = t.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if m > 0.0 {
        t.map(|v| 0.5 + 0.5 * v / m)
    } else {
        t.map(|_| 0.5)
    }
}

/// Hue follows the angle over [0, π), so opposite directions share a color.
fn colorize_orientation(angles: &Tensor) -> Result<Tensor> {
    let (_, h, w) = angles.dims3()?;
    let plane = h * w;
    let mut rgb = vec![0.0; 3 * plane];
    for (p, &theta) in angles.data().iter().enumerate() {
        let hue = (theta / std::f64::consts::PI).rem_euclid(1.0) * 6.0;
        let x = 1.0 - (hue % 2.0 - 1.0).abs();
        let (r, g, b) = match hue as usize {
            0 => (1.0, x, 0.0),
            1 => (x, 1.0, 0.0),
            2 => (0.0, 1.0, x),
            3 => (0.0, x, 1.0),
            4 => (x, 0.0, 1.0),
            _ => (1.0, 0.0, x),
        };
        rgb[p] = r;
        rgb[plane + p] = g;
        rgb[2 * plane + p] = b;
    }
    Ok(Tensor::new(&[3, h, w], rgb)?)
}

fn extract(input: &Path, out: &Path, bank_params: Option<&Path>) -> Result<()> {
    let bank = load_bank(bank_params)?;
    let image = data::read_png(input)?;
    let pair = structure::extract(&image, &bank)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, tex, orient) in [
        ("texture", &pair.texture, &pair.orientation),
        ("raw_texture", &pair.raw_texture, &pair.raw_orientation),
    ] {
        data::write_png(out.join(format!("{name}.png")), &normalize(tex))?;
        htx::write(out.join(format!("{name}.htx")), tex)?;
        let orient_name = name.replace("texture", "orientation");
        data::write_png(
            out.join(format!("{orient_name}.png")),
            &colorize_orientation(orient)?,
        )?;
        htx::write(out.join(format!("{orient_name}.htx")), orient)?;
    }
    println!("wrote texture and orientation maps to {}", out.display());
    Ok(())
}

fn dump_kernels(out: &Path, bank_params: Option<&Path>) -> Result<()> {
    let bank = load_bank(bank_params)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    htx::write(out.join("kernels.htx"), bank.kernels())?;
    htx::write(out.join("raw_kernels.htx"), bank.raw_kernels())?;
    let s = bank.support();
    for k in 0..bank.len() {
        let tile = Tensor::new(
            &[1, s, s],
            bank.kernels().data()[k * s * s..(k + 1) * s * s].to_vec(),
        )?;
        data::write_png(out.join(format!("kernel_{k:02}.png")), &signed_gray(&tile))?;
    }
    let params =
        serde_json::to_string_pretty(bank.params()).map_err(hairsynth::Error::from)? + "\n";
    fs::write(out.join("bank.json"), params)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} {s}x{s} kernels to {}", bank.len(), out.display());
    Ok(())
}
