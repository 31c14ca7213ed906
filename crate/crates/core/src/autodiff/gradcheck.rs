//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;

use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

use super::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many entries per input; `None` probes all.
    pub max_probes: Option<usize>,
    /// Gradient norms below this are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
    /// Drop probes whose `±step` evaluations take different branches of a
    /// piecewise op: the step crossed a kink, where no derivative exists.
    pub skip_kinks: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            max_probes: None,
            floor: 1e-6,
            seed: 0,
            skip_kinks: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    /// Relative error per input, in input order.
    pub errors: Vec<f64>,
    pub tolerance: f64,
    /// Probes dropped as kink crossings, and probes attempted.
    pub skipped: usize,
    pub probed: usize,
}

impl CheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    /// Every error within tolerance, and at most a quarter of the probes
    /// dropped as kinks.
    pub fn passed(&self) -> bool {
        self.errors
            .iter()
            .all(|e| e.is_finite() && *e <= self.tolerance)
            && 4 * self.skipped <= self.probed
    }
}

/// `build` maps the inputs (as tape leaves) to a scalar. Every input is
/// differentiated; the relative error of an input is
/// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)` over the
/// probed entries.
pub fn check<F>(name: &str, inputs: &[Tensor], build: F, opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let evaluate = |values: &[Tensor]| -> Result<(f64, Option<u64>)> {
        let mut tape = if opts.skip_kinks {
            Tape::with_branch_tracking()
        } else {
            Tape::new()
        };
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape.value(out).item()?, tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let (_, base) = evaluate(inputs)?;
    let (mut skipped, mut probed) = (0, 0);
    let mut errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(var, input.shape());
        let probes: Vec<usize> = match opts.max_probes {
            Some(k) if k < input.len() => {
                let mut r = rng::stream(opts.seed, "gradcheck", i as u64);
                let mut idx = sample(&mut r, input.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..input.len()).collect(),
        };
        let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
        for &j in &probes {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let (plus, sig_plus) = evaluate(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let (minus, sig_minus) = evaluate(&work)?;
            work[i].data_mut()[j] = orig;
            probed += 1;
            if sig_plus != base || sig_minus != base {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            nu2 += numeric * numeric;
        }
        let denom = an2.sqrt().max(nu2.sqrt()).max(opts.floor);
        errors.push(diff2.sqrt() / denom);
    }
    Ok(CheckReport {
        name: name.to_string(),
        errors,
        tolerance: opts.tolerance,
        skipped,
        probed,
    })
}
