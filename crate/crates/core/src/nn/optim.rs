use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::ParamStore;

/// Momentum-free adaptive step: each coordinate is divided by the root of
/// its accumulated squared gradient, so per-coordinate step sizes only
/// shrink over a run. With `adaptive` off the update is plain gradient
/// descent, `p -= lr * g`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub adaptive: bool,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            adaptive: true,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            second: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update. Parameters are rounded to f32 afterwards so that
    /// checkpoints reproduce them exactly.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("one gradient per parameter tensor required"));
        }
        if self.second.is_empty() {
            self.second = params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
        }
        let OptimizerConfig { adaptive, eps } = self.config;
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.second)
        {
            p.expect_same_shape(g)?;
            let pd = p.data_mut();
            if adaptive {
                for ((pi, &gi), vi) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vi += gi * gi;
                    *pi -= self.lr * gi / (vi.sqrt() + eps);
                }
            } else {
                for (pi, &gi) in pd.iter_mut().zip(g.data()) {
                    *pi -= self.lr * gi;
                }
            }
            p.round_to_f32();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_moves_by_lr_times_gradient() {
        let mut store = ParamStore::new();
        store.push("p", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = Optimizer::new(
            OptimizerConfig {
                adaptive: false,
                ..Default::default()
            },
            0.25,
        );
        opt.step(&mut store, &[Tensor::new(&[2], vec![2.0, 4.0]).unwrap()])
            .unwrap();
        assert_eq!(store.tensors()[0].data(), &[0.5, -2.0]);
    }

    #[test]
    fn adaptive_first_step_is_sign_scaled() {
        let mut store = ParamStore::new();
        store.push("p", Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerConfig::default(), 0.5);
        opt.step(&mut store, &[Tensor::new(&[2], vec![3.0, -0.01]).unwrap()])
            .unwrap();
        let d = store.tensors()[0].data();
        assert!(
            (d[0] + 0.5).abs() < 1e-6 && (d[1] - 0.5).abs() < 1e-5,
            "{d:?}"
        );
    }

    #[test]
    fn adaptive_steps_shrink_under_a_constant_gradient() {
        let mut store = ParamStore::new();
        store.push("p", Tensor::new(&[1], vec![0.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerConfig::default(), 1.0);
        let mut last = 0.0;
        for n in 1..=4 {
            opt.step(&mut store, &[Tensor::new(&[1], vec![2.0]).unwrap()])
                .unwrap();
            let now = store.tensors()[0].data()[0];
            // The n-th step is 1/sqrt(n).
            assert!(((last - now) - 1.0 / (n as f64).sqrt()).abs() < 1e-6);
            last = now;
        }
    }
}
