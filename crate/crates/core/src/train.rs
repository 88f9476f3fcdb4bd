//! Shared pieces of the training loops.

use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParamStore, Rng, Scalar, Tape, Var};

/// Per-step losses of a run, plus the step at which it diverged, if any.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub diverged: Option<usize>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l:.8e}\n", i + 1));
        }
        s
    }

    /// Mean loss over the first and last `window` steps.
    pub fn head_tail(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (
            mean(&self.losses[..w.min(self.losses.len())]),
            mean(&self.losses[self.losses.len().saturating_sub(w)..]),
        )
    }

    /// Turns a recorded divergence into the error callers report.
    pub fn check(&self) -> Result<()> {
        match self.diverged {
            Some(step) => Err(Error::Diverged { step }),
            None => Ok(()),
        }
    }
}

pub(crate) enum StepOutcome {
    Loss(f64),
    Diverged,
}

/// One optimizer step: `frozen` is bound as constants, `params` as
/// trainable leaves. Non-finite values leave `params` untouched.
pub(crate) fn adam_step<F: Scalar>(
    params: &mut ParamStore<F>,
    frozen: &[&ParamStore<F>],
    adam: &mut AdamState<F>,
    loss: impl FnOnce(&mut Tape<F>) -> Result<Var>,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    for f in frozen {
        tape.bind(f, false)?;
    }
    tape.bind(params, true)?;
    let l = match loss(&mut tape) {
        Ok(l) => l,
        Err(Error::NonFinite { .. }) => return Ok(StepOutcome::Diverged),
        Err(e) => return Err(e),
    };
    let value = tape.value(l).item()?.as_f64();
    if !value.is_finite() {
        return Ok(StepOutcome::Diverged);
    }
    let grads = match tape.backward(l) {
        Ok(g) => g,
        Err(Error::NonFinite { .. }) => return Ok(StepOutcome::Diverged),
        Err(e) => return Err(e),
    };
    adam.step(params, &grads)?;
    Ok(StepOutcome::Loss(value))
}

/// Fisher-Yates permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    idx
}

/// `n` indices drawn uniformly with replacement.
pub fn draw_batch(n: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.below(n)).collect()
}
