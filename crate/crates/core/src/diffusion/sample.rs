use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::schedule::{cfg_combine, ddim_step, NoiseSchedule};
use super::train::LatentNorm;
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, NormStats, Vocab, DEFAULT_FPS};
use crate::numerics::{ParamStore, Rng, Tensor};
use crate::vae::Vae;

/// Anything that maps noisy model-space latents to clean estimates.
///
/// `samples[b]` says which requested sample batch row `b` belongs to, so
/// per-sample inputs (control signals) can follow rows through CFG batching.
pub trait LatentModel {
    fn predict(
        &self,
        z: &Tensor<f32>,
        ts: &[usize],
        labels: &[usize],
        samples: &[usize],
    ) -> Result<Tensor<f32>>;
}

pub struct TeacherModel<'a> {
    pub den: &'a Denoiser,
    pub params: &'a ParamStore<f32>,
}

impl LatentModel for TeacherModel<'_> {
    fn predict(
        &self,
        z: &Tensor<f32>,
        ts: &[usize],
        labels: &[usize],
        _: &[usize],
    ) -> Result<Tensor<f32>> {
        self.den.predict(self.params, z, ts, labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// Model-space latents `[n * tokens, d_z]`.
    pub latents: Tensor<f32>,
    /// Network evaluations spent per sample.
    pub evals: Vec<usize>,
    /// Latent after every solver step, when requested.
    pub trajectory: Vec<Tensor<f32>>,
}

/// Initial noise: each sample draws its own `[tokens, d_z]` block.
pub fn initial_noise(rngs: &mut [Rng], tokens: usize, d_z: usize) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = rngs
        .iter_mut()
        .map(|r| r.gaussian_tensor(&[tokens, d_z]))
        .collect();
    Tensor::stack_rows(&parts)
}

/// Deterministic DDIM with classifier-free guidance; conditional and
/// unconditional predictions share one batched call per step.
#[allow(clippy::too_many_arguments)]
pub fn sample_ddim(
    model: &dyn LatentModel,
    sched: &NoiseSchedule,
    labels: &[usize],
    rngs: &mut [Rng],
    cfg: SampleConfig,
    tokens: usize,
    d_z: usize,
    keep_trajectory: bool,
) -> Result<SampleOutput> {
    if cfg.steps < 1 {
        return Err(Error::contract("ddim needs at least one step"));
    }
    if labels.len() != rngs.len() || labels.is_empty() {
        return Err(Error::contract("one rng per requested sample"));
    }
    let n = labels.len();
    let grid = sched.grid(cfg.steps)?;
    let mut z = initial_noise(rngs, tokens, d_z)?;
    let mut evals = vec![0usize; n];
    let mut trajectory = Vec::new();
    let mut all_labels = labels.to_vec();
    all_labels.extend(std::iter::repeat_n(Vocab::NULL, n));
    let samples: Vec<usize> = (0..n).chain(0..n).collect();
    for w in grid.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let zz = Tensor::stack_rows(&[z.clone(), z.clone()])?;
        let x0 = model.predict(&zz, &vec![t; 2 * n], &all_labels, &samples)?;
        evals.iter_mut().for_each(|e| *e += 2);
        let cond = x0.rows(0, n * tokens)?;
        let uncond = x0.rows(n * tokens, n * tokens)?;
        let guided = cfg_combine(&cond, &uncond, cfg.guidance)?;
        z = ddim_step(&z, &guided, t, t_prev, sched)?;
        if keep_trajectory {
            trajectory.push(z.clone());
        }
    }
    Ok(SampleOutput {
        latents: z,
        evals,
        trajectory,
    })
}

/// Model-space latents to denormalized motions.
pub fn decode_latents(
    vae: &Vae,
    vae_params: &ParamStore<f32>,
    norm: &LatentNorm,
    stats: &NormStats,
    latents: &Tensor<f32>,
    labels: &[usize],
) -> Result<Vec<MotionSequence>> {
    let raw = norm.from_model(latents)?;
    let frames = vae.decode_batch(vae_params, &raw, labels.len())?;
    frames
        .iter()
        .zip(labels)
        .map(|(f, &l)| MotionSequence::new(DEFAULT_FPS, Vocab::name(l)?, stats.denormalize(f)?))
        .collect()
}
