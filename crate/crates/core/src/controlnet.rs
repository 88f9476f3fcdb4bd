//! Trainable branch over the first two denoiser blocks, driven by joint
//! trajectory signals and joined back through zero-initialized projections.

use serde::{Deserialize, Serialize};

use crate::attention::GlaBlock;
use crate::consistency::BoundaryCoeffs;
use crate::diffusion::{
    q_sample_rows, Denoiser, LatentModel, LatentNorm, LatentSet, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::motion::{
    make_signal, ControlSignal, MaskPattern, MotionSequence, NormStats, FRAME_DIM, NUM_JOINTS,
};
use crate::nn::Linear;
use crate::numerics::{AdamConfig, AdamState, ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::train::{adam_step, draw_batch, StepOutcome, TrainLog};
use crate::vae::Vae;

/// Pooled targets per joint and axis, then one mask fraction per joint.
pub const CONTROL_FEATURES: usize = FRAME_DIM + NUM_JOINTS;

/// Normalized targets and mask of one signal in VAE patch layout, plus the
/// per-token pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSignal {
    /// `[tokens, CONTROL_FEATURES]`.
    pub features: Tensor<f32>,
    /// `[tokens, patch * 15]`, zero where unmasked.
    pub targets: Tensor<f32>,
    /// Same layout as `targets`, one or zero.
    pub mask: Tensor<f32>,
    pub count: usize,
}

/// Masked-mean pooling over each token's frame window.
pub fn prepare_signal(
    signal: &ControlSignal,
    stats: &NormStats,
    tokens: usize,
) -> Result<PreparedSignal> {
    let frames = signal.num_frames();
    if tokens == 0 || frames % tokens != 0 || stats.mean.len() != NUM_JOINTS {
        return Err(Error::contract(format!(
            "signal of {frames} frames cannot be pooled into {tokens} tokens"
        )));
    }
    let patch = frames / tokens;
    let mut features = vec![0.0f32; tokens * CONTROL_FEATURES];
    let mut targets = vec![0.0f32; frames * FRAME_DIM];
    let mut mask = vec![0.0f32; frames * FRAME_DIM];
    for f in 0..frames {
        for j in 0..NUM_JOINTS {
            if !signal.is_set(f, j) {
                continue;
            }
            let w = f / patch;
            let row = &mut features[w * CONTROL_FEATURES..(w + 1) * CONTROL_FEATURES];
            row[FRAME_DIM + j] += 1.0;
            for a in 0..3 {
                let i = (f * NUM_JOINTS + j) * 3 + a;
                let v = (signal.targets.data()[i] as f64 - stats.mean[j][a]) / stats.std[j][a];
                targets[i] = v as f32;
                mask[i] = 1.0;
                row[j * 3 + a] += v as f32;
            }
        }
    }
    for row in features.chunks_mut(CONTROL_FEATURES) {
        for j in 0..NUM_JOINTS {
            let n = row[FRAME_DIM + j];
            if n > 0.0 {
                row[j * 3..j * 3 + 3].iter_mut().for_each(|v| *v /= n);
            }
            row[FRAME_DIM + j] = n / patch as f32;
        }
    }
    let width = patch * FRAME_DIM;
    Ok(PreparedSignal {
        features: Tensor::new(vec![tokens, CONTROL_FEATURES], features)?,
        targets: Tensor::new(vec![tokens, width], targets)?,
        mask: Tensor::new(vec![tokens, width], mask)?,
        count: signal.count(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlNet {
    pub prefix: String,
    /// Denoiser blocks mirrored by the branch.
    pub mirrored: Vec<usize>,
    enc: Linear,
    blocks: Vec<GlaBlock>,
    zero: Vec<Linear>,
    d_model: usize,
}

impl ControlNet {
    pub fn new(den: &Denoiser) -> Result<Self> {
        let prefix = "ctrl".to_string();
        let d = den.cfg.d_model;
        let mirrored = vec![0, 1];
        Ok(Self {
            enc: Linear::new(&format!("{prefix}.enc"), CONTROL_FEATURES, d),
            blocks: mirrored
                .iter()
                .map(|i| GlaBlock::new(&format!("{prefix}.block{i}"), den.blocks[*i].cfg))
                .collect::<Result<_>>()?,
            zero: mirrored
                .iter()
                .map(|i| Linear::new(&format!("{prefix}.zero{i}"), d, d))
                .collect(),
            mirrored,
            prefix,
            d_model: d,
        })
    }

    /// Branch blocks copied from the base denoiser, projections exactly zero.
    pub fn init<F: Scalar>(
        &self,
        den: &Denoiser,
        base: &ParamStore<F>,
        rng: &mut Rng,
    ) -> Result<ParamStore<F>> {
        let mut s = ParamStore::new();
        self.enc.init(&mut s, rng, 1.0)?;
        for &i in &self.mirrored {
            let copy = base.copy_prefixed(
                &format!("{}.block{i}.", den.prefix),
                &format!("{}.block{i}.", self.prefix),
            )?;
            if copy.is_empty() {
                return Err(Error::Missing(format!(
                    "{}.block{i} in base parameters",
                    den.prefix
                )));
            }
            for (name, t) in copy.iter() {
                s.insert(name, t.clone())?;
            }
        }
        for z in &self.zero {
            s.insert(z.w.clone(), Tensor::zeros(vec![self.d_model, self.d_model]))?;
            s.insert(z.b.clone(), Tensor::zeros(vec![self.d_model]))?;
        }
        Ok(s)
    }

    /// Control tokens `[batch * tokens, d_model]` from stacked features.
    pub fn encode_tape<F: Scalar>(&self, tape: &mut Tape<F>, features: Var) -> Result<Var> {
        self.enc.forward(tape, features)
    }

    /// `features: [batch * tokens, CONTROL_FEATURES]`.
    pub fn forward_tape<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        den: &Denoiser,
        z: Var,
        ts: &[usize],
        labels: &[usize],
        features: &Tensor<F>,
    ) -> Result<Var> {
        let e = den.embed(tape, z, ts, labels)?;
        let want = [e.batch * den.cfg.tokens, CONTROL_FEATURES];
        if features.shape() != want {
            return Err(Error::Shape {
                op: "controlnet_forward",
                lhs: features.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let fv = tape.constant(features.clone());
        let c = self.encode_tape(tape, fv)?;
        let mut c = tape.add(e.x, c)?;
        let mut h = e.x;
        let mut outs = Vec::with_capacity(2);
        for (k, &i) in self.mirrored.iter().enumerate() {
            h = den.block(tape, i, h, &e)?;
            c = self.blocks[k].forward(tape, c, Some(e.cond), e.batch, den.cfg.tokens)?;
            let p = self.zero[k].forward(tape, c)?;
            h = tape.add(h, p)?;
            outs.push(h);
        }
        den.finish(tape, outs[0], outs[1], &e)
    }

    pub fn predict(
        &self,
        den: &Denoiser,
        base: &ParamStore<f32>,
        ctrl: &ParamStore<f32>,
        z: &Tensor<f32>,
        ts: &[usize],
        labels: &[usize],
        features: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        tape.bind(base, false)?;
        tape.bind(ctrl, false)?;
        let zv = tape.constant(z.clone());
        let y = self.forward_tape(&mut tape, den, zv, ts, labels, features)?;
        Ok(tape.value(y).clone())
    }
}

/// Tiles per-channel latent statistics over `rows` rows.
fn latent_affine<F: Scalar>(norm: &LatentNorm, rows: usize) -> (Tensor<F>, Tensor<F>) {
    let d = norm.mean.len();
    let s: Vec<F> = (0..rows * d).map(|i| F::c(norm.std[i % d])).collect();
    let m: Vec<F> = (0..rows * d).map(|i| F::c(norm.mean[i % d])).collect();
    (
        Tensor::new(vec![rows, d], s).expect("shape"),
        Tensor::new(vec![rows, d], m).expect("shape"),
    )
}

/// Handles into the tape for the loss and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct ControlLoss {
    pub total: Var,
    pub diffusion: Var,
    pub control: Var,
}

/// One supervised batch in model-space latents.
pub struct ControlBatch<F: Scalar> {
    pub z0: Tensor<F>,
    pub ts: Vec<usize>,
    pub labels: Vec<usize>,
    pub eps: Tensor<F>,
    /// Stacked [`PreparedSignal`] pieces.
    pub features: Tensor<F>,
    pub targets: Tensor<F>,
    pub mask: Tensor<F>,
    pub count: usize,
}

/// The tape must hold the base and VAE parameters frozen and the branch
/// parameters trainable.
#[allow(clippy::too_many_arguments)]
pub fn control_loss<F: Scalar>(
    tape: &mut Tape<F>,
    net: &ControlNet,
    den: &Denoiser,
    vae: &Vae,
    norm: &LatentNorm,
    batch: &ControlBatch<F>,
    sched: &NoiseSchedule,
    lambda: f64,
) -> Result<ControlLoss> {
    let n = batch.ts.len();
    let z_t = q_sample_rows(&batch.z0, &batch.ts, &batch.eps, sched)?;
    let zv = tape.constant(z_t);
    let x0 = net.forward_tape(tape, den, zv, &batch.ts, &batch.labels, &batch.features)?;
    let z0 = tape.constant(batch.z0.clone());
    let diffusion = tape.mse(x0, z0)?;
    let control = if batch.count == 0 {
        log::warn!("control batch has an empty mask; control term is zero");
        tape.constant(Tensor::scalar(F::zero()))
    } else {
        let (s, m) = latent_affine::<F>(norm, n * den.cfg.tokens);
        let zl = tape.mul_const(x0, s)?;
        let zl = tape.add_const(zl, m)?;
        let dec = vae.decode_tape(tape, zl, n)?;
        let tv = tape.constant(batch.targets.clone());
        let d = tape.sub(dec, tv)?;
        let d = tape.mul_const(d, batch.mask.clone())?;
        let d2 = tape.mul(d, d)?;
        let s = tape.sum(d2)?;
        tape.scale(s, 1.0 / (3 * batch.count) as f64)?
    };
    let w = tape.scale(control, lambda)?;
    let total = tape.add(diffusion, w)?;
    Ok(ControlLoss {
        total,
        diffusion,
        control,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lambda: f64,
    pub stride: usize,
    pub adam: AdamConfig,
}

impl Default for ControlTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lambda: 1.0,
            stride: 4,
            adam: AdamConfig::default(),
        }
    }
}

/// Stacks prepared signals for a batch.
pub fn stack_signals(
    signals: &[&PreparedSignal],
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>, usize)> {
    let f: Vec<Tensor<f32>> = signals.iter().map(|s| s.features.clone()).collect();
    let t: Vec<Tensor<f32>> = signals.iter().map(|s| s.targets.clone()).collect();
    let m: Vec<Tensor<f32>> = signals.iter().map(|s| s.mask.clone()).collect();
    Ok((
        Tensor::stack_rows(&f)?,
        Tensor::stack_rows(&t)?,
        Tensor::stack_rows(&m)?,
        signals.iter().map(|s| s.count).sum(),
    ))
}

/// Draw order: batch indices, timesteps, mask patterns, then noise.
pub fn draw_control_batch(
    data: &LatentSet,
    signals: &[Vec<PreparedSignal>],
    t_diff: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<ControlBatch<f32>> {
    let idx = draw_batch(data.len(), batch, rng);
    let ts: Vec<usize> = (0..batch).map(|_| 1 + rng.below(t_diff)).collect();
    let picks: Vec<&PreparedSignal> = idx
        .iter()
        .map(|&i| &signals[i][rng.below(signals[i].len())])
        .collect();
    let z0 = data.batch(&idx)?;
    let eps = rng.gaussian_tensor::<f32>(z0.shape());
    let (features, targets, mask, count) = stack_signals(&picks)?;
    Ok(ControlBatch {
        z0,
        ts,
        labels: idx.iter().map(|&i| data.labels[i]).collect(),
        eps,
        features,
        targets,
        mask,
        count,
    })
}

/// Every mask pattern for every motion, in corpus order.
pub fn training_signals(
    motions: &[MotionSequence],
    stats: &NormStats,
    tokens: usize,
    stride: usize,
) -> Result<Vec<Vec<PreparedSignal>>> {
    motions
        .iter()
        .map(|m| {
            MaskPattern::ALL
                .iter()
                .map(|&p| prepare_signal(&make_signal(m, p, stride), stats, tokens))
                .collect()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn train_controlnet(
    net: &ControlNet,
    den: &Denoiser,
    base: &ParamStore<f32>,
    vae: &Vae,
    vae_params: &ParamStore<f32>,
    data: &LatentSet,
    signals: &[Vec<PreparedSignal>],
    sched: &NoiseSchedule,
    cfg: &ControlTrainConfig,
    rng: &mut Rng,
) -> Result<(ParamStore<f32>, TrainLog)> {
    if signals.len() != data.len() {
        return Err(Error::contract("one signal set per training latent"));
    }
    let mut params = net.init(den, base, rng)?;
    let mut adam = AdamState::new(cfg.adam);
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let b = draw_control_batch(data, signals, sched.t_diff, cfg.batch, rng)?;
        let out = adam_step(&mut params, &[base, vae_params], &mut adam, |tape| {
            Ok(control_loss(tape, net, den, vae, &data.norm, &b, sched, cfg.lambda)?.total)
        })?;
        match out {
            StepOutcome::Loss(l) => log.losses.push(l),
            StepOutcome::Diverged => {
                log.diverged = Some(step);
                break;
            }
        }
        if step % 250 == 0 {
            log::debug!("controlnet step {step} loss {:.5}", log.losses[step - 1]);
        }
    }
    Ok((params, log))
}

/// Denoiser (teacher or consistency) with every call routed through the
/// branch; `features[s]` belongs to sample `s`.
pub struct ControlledModel<'a> {
    pub net: &'a ControlNet,
    pub den: &'a Denoiser,
    pub base: &'a ParamStore<f32>,
    pub ctrl: &'a ParamStore<f32>,
    pub features: Vec<Tensor<f32>>,
    /// Set when the base is a consistency model.
    pub consistency: Option<BoundaryCoeffs>,
}

impl LatentModel for ControlledModel<'_> {
    fn predict(
        &self,
        z: &Tensor<f32>,
        ts: &[usize],
        labels: &[usize],
        samples: &[usize],
    ) -> Result<Tensor<f32>> {
        let parts = samples
            .iter()
            .map(|&s| {
                self.features
                    .get(s)
                    .cloned()
                    .ok_or_else(|| Error::contract(format!("no control features for sample {s}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let feats = Tensor::stack_rows(&parts)?;
        let out = self
            .net
            .predict(self.den, self.base, self.ctrl, z, ts, labels, &feats)?;
        match &self.consistency {
            None => Ok(out),
            Some(c) => crate::consistency::apply_rows(&out, z, ts, c),
        }
    }
}
