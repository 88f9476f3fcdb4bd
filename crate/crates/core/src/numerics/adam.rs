use std::collections::HashMap;

use super::{Gradients, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter store.
#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar = f32> {
    pub config: AdamConfig,
    pub t: u64,
    m: HashMap<String, Tensor<F>>,
    v: HashMap<String, Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<F>> {
        self.m.get(name)
    }

    /// One update over `params` in store order. Every parameter must have a
    /// gradient entry.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>) -> Result<()> {
        // Validate before mutating anything.
        for (name, p) in params.iter() {
            let g = grads
                .param(name)
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let (lr, eps) = (F::c(c.lr), F::c(c.eps));
        let (bc1, bc2) = (F::c(bc1), F::c(bc2));
        for (name, p) in params.iter_mut() {
            let g = grads.param(name).expect("validated above");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn quad_grad(store: &ParamStore<f64>, scale: f64) -> Gradients<f64> {
        let mut tape = Tape::new();
        tape.bind(store, true).unwrap();
        let x = tape.param("x").unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.scale(sq, scale).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap()
    }

    fn store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // f = x^2 at x = 1 gives g = 2.
        let mut p = store(1.0);
        let g = quad_grad(&p, 1.0);
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        adam.step(&mut p, &g).unwrap();
        let x = p.get("x").unwrap().item().unwrap();
        assert!((x - 0.9).abs() < 1e-7, "{x}");
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(1.5);
        let g = quad_grad(&p, 0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.get("x").unwrap().item().unwrap(), 1.5);
    }

    #[test]
    fn ten_steps_shrink_magnitude() {
        let mut p = store(1.0);
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let g = quad_grad(&p, 1.0);
            adam.step(&mut p, &g).unwrap();
            let x = p.get("x").unwrap().item().unwrap().abs();
            assert!(x < prev, "{x} !< {prev}");
            prev = x;
        }
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = store(1.0);
        p.insert("orphan", Tensor::scalar(0.0)).unwrap();
        let g = quad_grad(&store(1.0), 1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        match adam.step(&mut p, &g) {
            Err(Error::MissingGradient(n)) => assert_eq!(n, "orphan"),
            other => panic!("{other:?}"),
        }
        assert_eq!(adam.t, 0);
    }
}
