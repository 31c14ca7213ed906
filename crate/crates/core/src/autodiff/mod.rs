//! Reverse-mode differentiation over [`Tensor`](crate::Tensor) values.

pub mod gradcheck;
mod ops;
mod tape;

pub use ops::{channel_argmax, sigmoid, ChannelMax, IndexMap};
pub use tape::{BackwardCtx, BackwardRule, Gradients, Tape, Var};
