use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::schedule::{q_sample_rows, NoiseSchedule};
use crate::error::{Error, Result};
use crate::motion::{Corpus, Vocab};
use crate::numerics::{AdamConfig, AdamState, ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::train::{adam_step, draw_batch, StepOutcome, TrainLog};
use crate::vae::{normalized, Vae};

/// Per-channel affine map from VAE latents to the unit-scale space the
/// diffusion models work in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNorm {
    pub fn identity(d_z: usize) -> Self {
        Self {
            mean: vec![0.0; d_z],
            std: vec![1.0; d_z],
        }
    }

    /// Statistics over the rows of `z: [n, d_z]`.
    pub fn fit(z: &Tensor<f32>) -> Self {
        let d = z.shape()[1];
        let n = z.shape()[0] as f64;
        let mut mean = vec![0.0; d];
        for r in z.data().chunks(d) {
            mean.iter_mut()
                .zip(r)
                .for_each(|(m, &v)| *m += v as f64 / n);
        }
        let mut var = vec![0.0; d];
        for r in z.data().chunks(d) {
            var.iter_mut()
                .zip(r.iter().zip(&mean))
                .for_each(|(s, (&v, m))| *s += (v as f64 - m).powi(2) / n);
        }
        Self {
            mean,
            std: var.into_iter().map(|v| v.sqrt().max(1e-6)).collect(),
        }
    }

    fn map<F: Scalar>(&self, z: &Tensor<F>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<F>> {
        let d = self.mean.len();
        if z.shape().last() != Some(&d) {
            return Err(Error::contract(format!(
                "latent width {:?} does not match {d} channels",
                z.shape()
            )));
        }
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| F::c(f(v.as_f64(), self.mean[i % d], self.std[i % d])))
            .collect();
        Tensor::new(z.shape().to_vec(), data)
    }

    pub fn to_model<F: Scalar>(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        self.map(z, |v, m, s| (v - m) / s)
    }

    pub fn from_model<F: Scalar>(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        self.map(z, |v, m, s| v * s + m)
    }
}

/// Posterior-mean latents of the training motions in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    /// `[n * tokens, d_z]`.
    pub z0: Tensor<f32>,
    pub labels: Vec<usize>,
    pub tokens: usize,
    pub norm: LatentNorm,
}

impl LatentSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let parts = idx
            .iter()
            .map(|&i| self.z0.rows(i * self.tokens, self.tokens))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_rows(&parts)
    }
}

pub fn prepare_latents(
    vae: &Vae,
    vae_params: &ParamStore<f32>,
    corpus: &Corpus,
) -> Result<LatentSet> {
    let data = normalized(corpus, false)?;
    let refs: Vec<&Tensor<f32>> = data.iter().collect();
    let raw = vae.encode_means(vae_params, &refs)?;
    let norm = LatentNorm::fit(&raw);
    let labels = corpus
        .train
        .iter()
        .map(|m| Vocab::class_index(&m.label))
        .collect::<Result<_>>()?;
    Ok(LatentSet {
        z0: norm.to_model(&raw)?,
        labels,
        tokens: vae.cfg.tokens,
        norm,
    })
}

/// `mse(denoise(q_sample(z0, t, eps), t, label), z0)`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<F: Scalar>(
    tape: &mut Tape<F>,
    den: &Denoiser,
    z0: &Tensor<F>,
    ts: &[usize],
    labels: &[usize],
    eps: &Tensor<F>,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let zt = q_sample_rows(z0, ts, eps, sched)?;
    let zv = tape.constant(zt);
    let pred = den.forward_tape(tape, zv, ts, labels)?;
    let target = tape.constant(z0.clone());
    tape.mse(pred, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub null_dropout: f64,
    pub adam: AdamConfig,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 32,
            null_dropout: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

/// Draw order per step: batch indices, timesteps in `1..=T`, dropout
/// uniforms, then noise.
pub(crate) fn draw_noisy_batch(
    data: &LatentSet,
    batch: usize,
    t_diff: usize,
    null_dropout: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Tensor<f32>, Vec<usize>, Vec<usize>, Tensor<f32>)> {
    let idx = draw_batch(data.len(), batch, rng);
    let ts: Vec<usize> = (0..batch).map(|_| 1 + rng.below(t_diff)).collect();
    let labels: Vec<usize> = idx
        .iter()
        .map(|&i| {
            if rng.uniform() < null_dropout {
                Vocab::NULL
            } else {
                data.labels[i]
            }
        })
        .collect();
    let z0 = data.batch(&idx)?;
    let eps = rng.gaussian_tensor::<f32>(z0.shape());
    Ok((idx, z0, ts, labels, eps))
}

pub fn train_diffusion(
    den: &Denoiser,
    data: &LatentSet,
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    rng: &mut Rng,
) -> Result<(ParamStore<f32>, TrainLog)> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::contract(
            "diffusion training needs data and a positive batch",
        ));
    }
    let mut params = den.init::<f32>(rng)?;
    let mut adam = AdamState::new(cfg.adam);
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let (_, z0, ts, labels, eps) =
            draw_noisy_batch(data, cfg.batch, sched.t_diff, cfg.null_dropout, rng)?;
        let out = adam_step(&mut params, &[], &mut adam, |tape| {
            diffusion_loss(tape, den, &z0, &ts, &labels, &eps, sched)
        })?;
        match out {
            StepOutcome::Loss(l) => log.losses.push(l),
            StepOutcome::Diverged => {
                log.diverged = Some(step);
                break;
            }
        }
        if step % 500 == 0 {
            log::debug!("diffusion step {step} loss {:.5}", log.losses[step - 1]);
        }
    }
    Ok((params, log))
}
