//! Central finite-difference gradient checking in 64-bit precision.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A deterministic scalar function of a list of tensors.
pub trait Objective {
    fn value(&self, params: &[Tensor<f64>]) -> Result<f64>;

    fn value_and_grad(&self, params: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>;
}

/// Objective defined by recording onto a [`Tape`].
pub struct TapeObjective<G>(pub G);

impl<G> Objective for TapeObjective<G>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fn value(&self, params: &[Tensor<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let l = (self.0)(&mut tape, &vars)?;
        tape.value(l).item()
    }

    fn value_and_grad(&self, params: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let l = (self.0)(&mut tape, &vars)?;
        let value = tape.value(l).item()?;
        let grads = tape.backward(l)?;
        let out = vars
            .iter()
            .zip(params)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect();
        Ok((value, out))
    }
}

/// Objective over a whole parameter store; `f` records the loss after the
/// store has been bound (trainable) onto the tape.
pub struct StoreObjective<'a, G> {
    pub template: &'a ParamStore<f64>,
    pub f: G,
}

impl<G> StoreObjective<'_, G>
where
    G: Fn(&mut Tape<f64>) -> Result<Var>,
{
    fn store_from(&self, params: &[Tensor<f64>]) -> Result<ParamStore<f64>> {
        let mut s = ParamStore::new();
        for (name, t) in self.template.names().iter().zip(params) {
            s.insert(name.clone(), t.clone())?;
        }
        Ok(s)
    }

    pub fn params(&self) -> Vec<Tensor<f64>> {
        self.template.iter().map(|(_, t)| t.clone()).collect()
    }
}

impl<G> Objective for StoreObjective<'_, G>
where
    G: Fn(&mut Tape<f64>) -> Result<Var>,
{
    fn value(&self, params: &[Tensor<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        tape.bind(&self.store_from(params)?, false)?;
        let l = (self.f)(&mut tape)?;
        tape.value(l).item()
    }

    fn value_and_grad(&self, params: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let store = self.store_from(params)?;
        tape.bind(&store, true)?;
        let l = (self.f)(&mut tape)?;
        let value = tape.value(l).item()?;
        let grads = tape.backward(l)?;
        let out = store
            .iter()
            .map(|(name, p)| {
                grads
                    .param(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect();
        Ok((value, out))
    }
}

/// Max over all parameter entries of
/// `|analytic - fd| / max(1, |analytic|, |fd|)` with central differences.
pub fn grad_check(obj: &impl Objective, params: &[Tensor<f64>], fd_step: f64) -> Result<f64> {
    let base = obj.value(params)?;
    if base.to_bits() != obj.value(params)?.to_bits() {
        return Err(Error::Nondeterministic);
    }
    let (_, analytic) = obj.value_and_grad(params)?;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + fd_step;
            let up = obj.value(&work)?;
            work[pi].data_mut()[j] = orig - fd_step;
            let down = obj.value(&work)?;
            work[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * fd_step);
            let a = grad.data()[j];
            let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
