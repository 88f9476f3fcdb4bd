//! Small layer helpers shared by the networks.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Affine layer `x @ w + b` with `w: [d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            d_in,
            d_out,
        }
    }

    /// Gaussian weights with std `gain / sqrt(d_in)`, zero bias.
    pub fn init<F: Scalar>(
        &self,
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        gain: f64,
    ) -> Result<()> {
        let std = gain / (self.d_in as f64).sqrt();
        let w = rng
            .gaussian_tensor::<F>(&[self.d_in, self.d_out])
            .map(|v| v * F::c(std));
        store.insert(self.w.clone(), w)?;
        store.insert(self.b.clone(), Tensor::zeros(vec![self.d_out]))
    }

    pub fn zero<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        store.get_mut(&self.w)?.data_mut().fill(F::zero());
        store.get_mut(&self.b)?.data_mut().fill(F::zero());
        Ok(())
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(&self.w)?, tape.param(&self.b)?);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Layer norm with learned gain and bias over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub g: String,
    pub b: String,
    pub d: usize,
}

impl Norm {
    pub fn new(prefix: &str, d: usize) -> Self {
        Self {
            g: format!("{prefix}.g"),
            b: format!("{prefix}.b"),
            d,
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        store.insert(self.g.clone(), Tensor::ones(vec![self.d]))?;
        store.insert(self.b.clone(), Tensor::zeros(vec![self.d]))
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(&self.g)?, tape.param(&self.b)?);
        tape.layer_norm(x, g, b)
    }
}

/// Learned table, e.g. positional or label embeddings.
pub fn init_table<F: Scalar>(
    store: &mut ParamStore<F>,
    name: &str,
    rows: usize,
    d: usize,
    std: f64,
    rng: &mut Rng,
) -> Result<()> {
    let t = rng.gaussian_tensor::<F>(&[rows, d]).map(|v| v * F::c(std));
    store.insert(name.to_string(), t)
}

/// Transformer-style sinusoidal features of a scalar position, `[n, dim]`.
pub fn sinusoidal<F: Scalar>(positions: &[f64], dim: usize) -> Result<Tensor<F>> {
    if dim % 2 != 0 {
        return Err(Error::contract(format!(
            "sinusoidal dim {dim} must be even"
        )));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(F::c((p * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(F::c((p * freq).cos()));
        }
    }
    Tensor::new(vec![positions.len(), dim], data)
}

/// Row indices repeating each of `batch` rows `times` times.
pub fn repeat_rows(batch: usize, times: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| std::iter::repeat_n(b, times))
        .collect()
}

/// Row indices tiling `0..rows` `batch` times, e.g. positional tables.
pub fn tile_rows(batch: usize, rows: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| 0..rows).collect()
}
