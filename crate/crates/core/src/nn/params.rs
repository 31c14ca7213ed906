use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors of one network, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a leaf; `trainable` decides whether the
    /// leaves receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    /// Replaces all tensors, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::shape("parameter names differ"));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            a.expect_same_shape(b)?;
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Tape handles of a [`ParamStore`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn at(&self, i: usize) -> Var {
        self.0[i]
    }

    /// Gradients of every parameter, zeros where the loss did not reach.
    pub fn gradients(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.0
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// 3x3 (or 1x1) zero-padded convolution with a per-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    weight: usize,
    bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    /// Fan-in scaled uniform weights, zero bias, both rounded to f32.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut w = Tensor::rand_uniform(
            &[out_channels, in_channels, kernel, kernel],
            -bound,
            bound,
            rng,
        );
        w.round_to_f32();
        let weight = store.push(format!("{name}.weight"), w);
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bound.at(self.weight), Padding::Zero)?;
        tape.add_channel_bias(y, bound.at(self.bias))
    }

    pub fn forward_lrelu(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = self.forward(tape, bound, x)?;
        tape.leaky_relu(y, LEAKY_SLOPE)
    }
}
