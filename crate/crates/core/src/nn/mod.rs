//! Networks, parameters, optimizer and checkpoints.

pub mod checkpoint;
mod models;
mod optim;
mod params;

pub use models::{
    BasicGenerator, DiscConfig, DiscOutput, PatchDiscriminator, Regenerator, UNet, UNetConfig,
    UNetOutput, STRUCTURE_CHANNELS,
};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::{Bound, Conv, ParamStore, LEAKY_SLOPE};
