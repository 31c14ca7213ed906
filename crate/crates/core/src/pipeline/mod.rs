//! Staged training, evaluation and the gradient-check suite.

mod config;
mod eval;
pub mod gradsuite;
mod run;
mod train;

pub use config::{Stage, StageState, StageSteps, Task, TrainConfig};
pub use eval::{evaluate, metrics, side_by_side, EvalReport, ImageMetrics, ImageReport};
pub use run::{
    evaluate_dir, load_config, load_generators, load_state, panel_dir, run_remaining, run_stage,
    CONFIG_FILE, STATE_FILE,
};
pub use train::{
    joint_forward, joint_objective, train_basic, train_joint, train_regen, BasicOutcome, Context,
    JointOutcome, JointPass, LossLog, Prepared, RegenOutcome, StageOutput, StepLosses,
    StructureSource,
};
