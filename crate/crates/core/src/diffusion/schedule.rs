use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_STEPS: usize = 100;
pub const COSINE_OFFSET: f64 = 0.008;

/// Cumulative signal coefficients `alpha_bar[t]`, `t = 0..=t_diff`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_diff: usize,
    pub s: f64,
    pub alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::cosine(DEFAULT_STEPS, COSINE_OFFSET).expect("valid default")
    }
}

impl NoiseSchedule {
    /// `alpha_bar(t) = f(t) / f(0)`, `f(t) = cos^2(((t / T + s) / (1 + s)) * pi / 2)`,
    /// with the endpoints pinned to exactly 1 and 0.
    pub fn cosine(t_diff: usize, s: f64) -> Result<Self> {
        if t_diff < 2 {
            return Err(Error::contract(format!(
                "need at least 2 diffusion steps, got {t_diff}"
            )));
        }
        let f = |t: f64| {
            (((t / t_diff as f64 + s) / (1.0 + s)) * FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let f0 = f(0.0);
        let mut alpha_bar: Vec<f64> = (0..=t_diff).map(|t| f(t as f64) / f0).collect();
        alpha_bar[0] = 1.0;
        alpha_bar[t_diff] = 0.0;
        Ok(Self {
            t_diff,
            s,
            alpha_bar,
        })
    }

    pub fn at(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::contract(format!("timestep {t} outside 0..={}", self.t_diff)))
    }

    /// `K`-step grid evenly spaced in step index: `T = tau_0 > ... > tau_K = 0`.
    pub fn grid(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_diff {
            return Err(Error::contract(format!(
                "sampling steps must lie in 1..={}, got {steps}",
                self.t_diff
            )));
        }
        Ok((0..=steps)
            .map(|i| ((self.t_diff * (steps - i)) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

/// `z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn q_sample<F: Scalar>(
    z0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    let ab = sched.at(t)?;
    combine(z0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// `a * x + b * y` elementwise, evaluated in 64-bit.
pub(crate) fn combine<F: Scalar>(
    x: &Tensor<F>,
    a: f64,
    y: &Tensor<F>,
    b: f64,
) -> Result<Tensor<F>> {
    x.zip_map(y, |p, q| F::c(a * p.as_f64() + b * q.as_f64()))
}

/// Per-row timesteps variant: `z0`, `eps` are `[n * rows, d]`, `ts` has `n` entries.
pub fn q_sample_rows<F: Scalar>(
    z0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if z0.shape() != eps.shape() || z0.is_empty() || z0.len() % ts.len().max(1) != 0 {
        return Err(Error::Shape {
            op: "q_sample",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let per = z0.len() / ts.len();
    let coef: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| sched.at(t).map(|ab| (ab.sqrt(), (1.0 - ab).sqrt())))
        .collect::<Result<_>>()?;
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let (a, b) = coef[i / per];
            F::c(a * x.as_f64() + b * e.as_f64())
        })
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// Deterministic DDIM update toward `t_prev` given the clean estimate `x0`.
pub fn ddim_step<F: Scalar>(
    z_t: &Tensor<F>,
    x0: &Tensor<F>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if t == 0 || t_prev >= t || t > sched.t_diff {
        return Err(Error::contract(format!(
            "ddim step needs 0 <= t_prev < t <= {}, got t={t} t_prev={t_prev}",
            sched.t_diff
        )));
    }
    if t_prev == 0 {
        return Ok(x0.clone());
    }
    let (ab, abp) = (sched.at(t)?, sched.at(t_prev)?);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (abp.sqrt(), (1.0 - abp).sqrt());
    z_t.zip_map(x0, |z, x| {
        let (z, x) = (z.as_f64(), x.as_f64());
        let eps = (z - sa * x) / sb;
        F::c(pa * x + pb * eps)
    })
}

/// Per-sequence DDIM update; `ts` and `t_prev` have one entry per sequence.
pub fn ddim_step_rows<F: Scalar>(
    z_t: &Tensor<F>,
    x0: &Tensor<F>,
    ts: &[usize],
    t_prev: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if ts.len() != t_prev.len()
        || ts.is_empty()
        || z_t.shape() != x0.shape()
        || z_t.shape()[0] % ts.len() != 0
    {
        return Err(Error::Shape {
            op: "ddim_step_rows",
            lhs: z_t.shape().to_vec(),
            rhs: x0.shape().to_vec(),
        });
    }
    let rows = z_t.shape()[0] / ts.len();
    let parts = ts
        .iter()
        .zip(t_prev)
        .enumerate()
        .map(|(i, (&t, &tp))| {
            ddim_step(
                &z_t.rows(i * rows, rows)?,
                &x0.rows(i * rows, rows)?,
                t,
                tp,
                sched,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_rows(&parts)
}

/// `uncond + w * (cond - uncond)`.
pub fn cfg_combine<F: Scalar>(cond: &Tensor<F>, uncond: &Tensor<F>, w: f64) -> Result<Tensor<F>> {
    uncond.zip_map(cond, |u, c| {
        let (u, c) = (u.as_f64(), c.as_f64());
        F::c(u + w * (c - u))
    })
}
