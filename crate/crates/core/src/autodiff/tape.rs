use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a> {
    pub grad_output: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    /// Which inputs need a gradient; rules may return `None` for the rest.
    pub needs_grad: &'a [bool],
}

/// Vector-Jacobian product of one recorded operation: one entry per input.
pub type BackwardRule = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    inputs: Vec<usize>,
    rule: BackwardRule,
}

/// Records forward values in creation order, which is also a topological
/// order, together with the backward rule of every operation whose output
/// depends on a leaf that requires gradients.
pub struct Tape {
    id: u64,
    values: Vec<Tensor>,
    requires: Vec<bool>,
    nodes: Vec<Option<Node>>,
    branches: Option<DefaultHasher>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            requires: Vec::new(),
            nodes: Vec::new(),
            branches: None,
        }
    }

    /// A tape that fingerprints the branch taken by every piecewise op
    /// (rectifier side, clamp region, argmax channel). Two evaluations with
    /// equal [`Tape::branch_signature`] lie on the same smooth piece.
    pub fn with_branch_tracking() -> Self {
        let mut t = Self::new();
        t.branches = Some(DefaultHasher::new());
        t
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(Hasher::finish)
    }

    pub(crate) fn note_branches(&mut self, branches: impl Iterator<Item = usize>) {
        if let Some(h) = self.branches.as_mut() {
            for b in branches {
                h.write_usize(b);
            }
        }
    }

    pub(crate) fn tracks_branches(&self) -> bool {
        self.branches.is_some()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.check(var).is_ok() && self.requires[var.index]
    }

    /// # Panics
    /// If `var` was created by another tape.
    pub fn value(&self, var: Var) -> &Tensor {
        self.try_value(var).expect("variable from a different tape")
    }

    pub fn try_value(&self, var: Var) -> Result<&Tensor> {
        self.check(var)?;
        Ok(&self.values[var.index])
    }

    pub(crate) fn check(&self, var: Var) -> Result<()> {
        if var.tape == self.id && var.index < self.values.len() {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// This is how every built-in op is registered; it is public so that
    /// callers can add their own ops (and so the gradient checker can be
    /// shown to catch a wrong rule).
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        rule: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        Ok(self.record(inputs, output, rule))
    }

    pub(crate) fn record(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        rule: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires = inputs.iter().any(|v| self.requires[v.index]);
        let node = requires.then(|| Node {
            inputs: inputs.iter().map(|v| v.index).collect(),
            rule: Box::new(rule),
        });
        self.push(output, requires, node)
    }

    fn push(&mut self, value: Tensor, requires: bool, node: Option<Node>) -> Var {
        let index = self.values.len();
        self.values.push(value);
        self.requires.push(requires);
        self.nodes.push(node);
        Var {
            tape: self.id,
            index,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let loss_value = &self.values[loss.index];
        if loss_value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Tensor::full(loss_value.shape(), 1.0));

        for i in (0..=loss.index).rev() {
            let Some(node) = &self.nodes[i] else { continue };
            let Some(grad_output) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.values[j]).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.requires[j]).collect();
            let ctx = BackwardCtx {
                grad_output: &grad_output,
                inputs: &inputs,
                output: &self.values[i],
                needs_grad: &needs,
            };
            let input_grads = (node.rule)(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&j, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), self.values[j].shape(), "bad gradient shape");
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(grad_output);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradients of one scalar with respect to every recorded value that
/// requires them.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// The gradient, or zeros of the given shape when `var` did not influence
    /// the loss.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}
