//! Conditional latent diffusion teacher: schedule, denoiser, training, DDIM.

mod denoiser;
mod sample;
mod schedule;
mod train;

pub use denoiser::{Denoiser, DenoiserConfig, Embedded};
pub use sample::{
    decode_latents, initial_noise, sample_ddim, LatentModel, SampleConfig, SampleOutput,
    TeacherModel,
};
pub use schedule::{
    cfg_combine, ddim_step, ddim_step_rows, q_sample, q_sample_rows, NoiseSchedule, COSINE_OFFSET,
    DEFAULT_STEPS,
};
pub use train::{
    diffusion_loss, prepare_latents, train_diffusion, DiffusionTrainConfig, LatentNorm, LatentSet,
};
