use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::OptimizerConfig;
use crate::structure::BankParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sketch2hair,
    HairSr4,
    HairSr8,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Sketch2hair, Task::HairSr4, Task::HairSr8];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sketch2hair => "sketch2hair",
            Task::HairSr4 => "hair_sr4",
            Task::HairSr8 => "hair_sr8",
        }
    }

    /// Upscaling factor from the basic network's input to the output.
    pub fn upscale(self) -> usize {
        match self {
            Task::Sketch2hair => 1,
            Task::HairSr4 => 4,
            Task::HairSr8 => 8,
        }
    }

    pub fn input_channels(self) -> usize {
        match self {
            Task::Sketch2hair => 2,
            _ => 3,
        }
    }

    /// Channels of the discriminator's conditioning input (the sketch or the
    /// bicubic-upsampled low-resolution image).
    pub fn condition_channels(self) -> usize {
        self.input_channels()
    }

    pub fn uses_aux(self) -> bool {
        self != Task::Sketch2hair
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Basic,
    RegenGt,
    RegenCoarse,
    Joint,
}

impl Stage {
    pub const ORDER: [Stage; 4] = [
        Stage::Basic,
        Stage::RegenGt,
        Stage::RegenCoarse,
        Stage::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Basic => "basic",
            Stage::RegenGt => "regen_gt",
            Stage::RegenCoarse => "regen_coarse",
            Stage::Joint => "joint",
        }
    }

    pub fn previous(self) -> Option<Stage> {
        let i = Stage::ORDER.iter().position(|&s| s == self)?;
        i.checked_sub(1).map(|j| Stage::ORDER[j])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSteps {
    pub basic: usize,
    pub regen_gt: usize,
    pub regen_coarse: usize,
    pub joint: usize,
}

impl Default for StageSteps {
    fn default() -> Self {
        Self {
            basic: 2000,
            regen_gt: 1000,
            regen_coarse: 1000,
            joint: 500,
        }
    }
}

impl StageSteps {
    pub fn get(&self, stage: Stage) -> usize {
        match stage {
            Stage::Basic => self.basic,
            Stage::RegenGt => self.regen_gt,
            Stage::RegenCoarse => self.regen_coarse,
            Stage::Joint => self.joint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub weights: LossWeights,
    pub stage_steps: StageSteps,
    pub lr_base: f64,
    pub lr_finetune: f64,
    pub batch: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Coefficient of the texture loss on the basic network's output.
    pub texture_weight: f64,
    pub base_channels: usize,
    pub regen_depth: usize,
    pub disc_layers: usize,
    pub disc_base_channels: usize,
    pub extractor_seed: u64,
    pub bank: BankParams,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Sketch2hair,
            weights: LossWeights::default(),
            stage_steps: StageSteps::default(),
            lr_base: 2e-3,
            lr_finetune: 2e-4,
            batch: 1,
            seed: 0,
            image_size: 64,
            texture_weight: 0.003,
            base_channels: 16,
            regen_depth: 4,
            disc_layers: 3,
            disc_base_channels: 16,
            extractor_seed: 7,
            bank: BankParams::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.bank.validate()?;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr_base) || !positive(self.lr_finetune) {
            return Err(Error::invalid("learning rates must be positive and finite"));
        }
        if self.lr_finetune >= self.lr_base {
            return Err(Error::invalid(format!(
                "lr_finetune {} must be below lr_base {}",
                self.lr_finetune, self.lr_base
            )));
        }
        if Stage::ORDER.iter().any(|&s| self.stage_steps.get(s) == 0) {
            return Err(Error::invalid("every stage needs at least one step"));
        }
        if Stage::ORDER
            .iter()
            .any(|&s| self.stage_steps.get(s) > 10_000_000)
        {
            return Err(Error::invalid("stage step count too large"));
        }
        if !(self.texture_weight.is_finite() && self.texture_weight >= 0.0) {
            return Err(Error::invalid(
                "texture_weight must be finite and nonnegative",
            ));
        }
        if self.batch == 0 || self.batch > 1024 {
            return Err(Error::invalid("batch must be in [1, 1024]"));
        }
        let size = self.image_size;
        if !size.is_power_of_two() || !(16..=1024).contains(&size) {
            return Err(Error::invalid(format!(
                "image_size {size} must be a power of two in [16, 1024]"
            )));
        }
        if size / self.task.upscale() < 2 {
            return Err(Error::invalid(
                "low-resolution input would be smaller than 2x2",
            ));
        }
        if self.regen_depth == 0 || (1usize << self.regen_depth.min(31)) > size {
            return Err(Error::invalid(format!(
                "regen_depth {} does not fit {size}",
                self.regen_depth
            )));
        }
        if self.disc_layers < 3
            || (1usize << self.disc_layers.min(31)) > size
            || self.disc_layers > 8
        {
            return Err(Error::invalid(format!(
                "disc_layers {} must be in [3, log2 size]",
                self.disc_layers
            )));
        }
        for (name, c) in [
            ("base_channels", self.base_channels),
            ("disc_base_channels", self.disc_base_channels),
        ] {
            if c == 0 || c > 256 {
                return Err(Error::invalid(format!("{name} must be in [1, 256]")));
            }
        }
        Ok(())
    }

    pub fn lr(&self, stage: Stage) -> f64 {
        if stage == Stage::Joint {
            self.lr_finetune
        } else {
            self.lr_base
        }
    }
}

/// Completed stages of a checkpoint directory, persisted as `state.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageState {
    pub task: Option<Task>,
    pub completed: Vec<Stage>,
    /// Steps run by the most recent stage.
    pub step: usize,
    /// Checkpoint directory name of each completed stage.
    pub checkpoints: Vec<String>,
}

impl StageState {
    pub fn last(&self) -> Option<Stage> {
        self.completed.last().copied()
    }

    /// Errors unless `next` directly follows the last completed stage.
    pub fn check_next(&self, next: Stage) -> Result<()> {
        if self.last() == next.previous() {
            Ok(())
        } else {
            Err(Error::StageOrder {
                from: self.last().map_or("start", Stage::name).to_string(),
                to: next.name().to_string(),
            })
        }
    }

    pub fn advance(&mut self, stage: Stage, step: usize) -> Result<()> {
        self.check_next(stage)?;
        self.completed.push(stage);
        self.checkpoints.push(stage.name().to_string());
        self.step = step;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let s: StageState = serde_json::from_str(text)?;
        let expected = &Stage::ORDER[..s.completed.len().min(4)];
        if s.completed.len() > 4
            || s.completed != expected
            || s.checkpoints.len() != s.completed.len()
        {
            return Err(Error::Format(
                "stage state is not an ordered prefix of the schedule".into(),
            ));
        }
        Ok(s)
    }
}
