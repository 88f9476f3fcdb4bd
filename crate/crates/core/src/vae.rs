//! Motion VAE: 8-frame patches to latent tokens and back.

use serde::{Deserialize, Serialize};

use crate::attention::{BlockConfig, GlaBlock};
use crate::error::{Error, Result};
use crate::motion::{Corpus, FRAME_DIM, NUM_JOINTS};
use crate::nn::{init_table, tile_rows, Linear};
use crate::numerics::{AdamConfig, AdamState, ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::train::{adam_step, shuffled, StepOutcome, TrainLog};

const LOGVAR_LIMIT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub frames: usize,
    pub tokens: usize,
    pub d_z: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            tokens: 8,
            d_z: 16,
            d_model: 128,
            heads: 4,
            blocks: 2,
        }
    }
}

impl VaeConfig {
    pub fn patch(&self) -> usize {
        self.frames / self.tokens
    }

    fn patch_dim(&self) -> usize {
        self.patch() * FRAME_DIM
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub cfg: VaeConfig,
    enc_in: Linear,
    enc_blocks: Vec<GlaBlock>,
    enc_out: Linear,
    dec_in: Linear,
    dec_blocks: Vec<GlaBlock>,
    dec_out: Linear,
}

/// Per-sequence squared reconstruction error, KL, and `recon + beta * kl`,
/// all averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

impl Vae {
    pub fn new(cfg: VaeConfig) -> Result<Self> {
        if cfg.tokens == 0 || cfg.frames % cfg.tokens != 0 {
            return Err(Error::contract(format!(
                "{} frames are not divisible into {} tokens",
                cfg.frames, cfg.tokens
            )));
        }
        let (d, p) = (cfg.d_model, cfg.patch_dim());
        let bc = BlockConfig::new(d, cfg.heads, 0);
        let blocks = |side: &str| {
            (0..cfg.blocks)
                .map(|i| GlaBlock::new(&format!("vae.{side}.block{i}"), bc))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            cfg,
            enc_in: Linear::new("vae.enc.in", p, d),
            enc_blocks: blocks("enc")?,
            enc_out: Linear::new("vae.enc.out", d, 2 * cfg.d_z),
            dec_in: Linear::new("vae.dec.in", cfg.d_z, d),
            dec_blocks: blocks("dec")?,
            dec_out: Linear::new("vae.dec.out", d, p),
        })
    }

    pub fn init<F: Scalar>(&self, rng: &mut Rng) -> Result<ParamStore<F>> {
        let mut s = ParamStore::new();
        let (d, l) = (self.cfg.d_model, self.cfg.tokens);
        self.enc_in.init(&mut s, rng, 1.0)?;
        init_table(&mut s, "vae.enc.pos", l, d, 0.1, rng)?;
        for b in &self.enc_blocks {
            b.init(&mut s, rng)?;
        }
        self.enc_out.init(&mut s, rng, 0.5)?;
        self.dec_in.init(&mut s, rng, 1.0)?;
        init_table(&mut s, "vae.dec.pos", l, d, 0.1, rng)?;
        for b in &self.dec_blocks {
            b.init(&mut s, rng)?;
        }
        self.dec_out.init(&mut s, rng, 0.5)?;
        Ok(s)
    }

    fn add_pos<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        h: Var,
        table: &str,
        batch: usize,
    ) -> Result<Var> {
        let pos = tape.param(table)?;
        let pos = tape.gather_rows(pos, &tile_rows(batch, self.cfg.tokens))?;
        tape.add(h, pos)
    }

    /// `x: [batch * tokens, patch * 15]` normalized patches. Returns
    /// `(mean, logvar)`, each `[batch * tokens, d_z]`, logvar clamped.
    pub fn encode_tape<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let l = self.cfg.tokens;
        let want = [batch * l, self.cfg.patch_dim()];
        if tape.value(x).shape() != want {
            return Err(Error::Shape {
                op: "vae_encode",
                lhs: tape.value(x).shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let mut h = self.enc_in.forward(tape, x)?;
        h = self.add_pos(tape, h, "vae.enc.pos", batch)?;
        for b in &self.enc_blocks {
            h = b.forward(tape, h, None, batch, l)?;
        }
        let o = self.enc_out.forward(tape, h)?;
        let dz = self.cfg.d_z;
        let mean = tape.slice(o, 1, 0, dz)?;
        let lv = tape.slice(o, 1, dz, dz)?;
        let lv = tape.clamp(lv, -LOGVAR_LIMIT, LOGVAR_LIMIT)?;
        Ok((mean, lv))
    }

    /// `z: [batch * tokens, d_z]` to normalized patches.
    pub fn decode_tape<F: Scalar>(&self, tape: &mut Tape<F>, z: Var, batch: usize) -> Result<Var> {
        let l = self.cfg.tokens;
        let want = [batch * l, self.cfg.d_z];
        if tape.value(z).shape() != want {
            return Err(Error::Shape {
                op: "vae_decode",
                lhs: tape.value(z).shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let mut h = self.dec_in.forward(tape, z)?;
        h = self.add_pos(tape, h, "vae.dec.pos", batch)?;
        for b in &self.dec_blocks {
            h = b.forward(tape, h, None, batch, l)?;
        }
        self.dec_out.forward(tape, h)
    }

    /// Stacks normalized `[frames, joints, 3]` motions into patch rows.
    pub fn patchify<F: Scalar>(&self, motions: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let c = &self.cfg;
        let mut data = Vec::with_capacity(motions.len() * c.frames * FRAME_DIM);
        for m in motions {
            let s = m.shape();
            if s.len() != 3 || s[1] != NUM_JOINTS || s[2] != 3 {
                return Err(Error::contract(format!(
                    "motion shape {s:?} is not [T, 5, 3]"
                )));
            }
            if s[0] % c.tokens != 0 {
                return Err(Error::contract(format!(
                    "{} frames are not divisible into {} tokens",
                    s[0], c.tokens
                )));
            }
            if s[0] != c.frames {
                return Err(Error::contract(format!(
                    "expected {} frames, got {}",
                    c.frames, s[0]
                )));
            }
            data.extend_from_slice(m.data());
        }
        Tensor::new(vec![motions.len() * c.tokens, c.patch_dim()], data)
    }

    /// Inverse of [`Vae::patchify`] for one sequence (`[tokens, patch_dim]`).
    pub fn unpatchify<F: Scalar>(&self, patches: Tensor<F>) -> Result<Tensor<F>> {
        patches.reshape(vec![self.cfg.frames, NUM_JOINTS, 3])
    }

    /// Posterior parameters of one normalized motion, `[tokens, d_z]` each.
    pub fn encode<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        frames: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let x = self.patchify(&[frames])?;
        let mut tape = Tape::new();
        tape.bind(store, false)?;
        let xv = tape.constant(x);
        let (m, lv) = self.encode_tape(&mut tape, xv, 1)?;
        Ok((tape.value(m).clone(), tape.value(lv).clone()))
    }

    /// Posterior means of many motions, stacked `[n * tokens, d_z]`.
    pub fn encode_means<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        frames: &[&Tensor<F>],
    ) -> Result<Tensor<F>> {
        let mut out = Vec::new();
        for chunk in frames.chunks(64) {
            let x = self.patchify(chunk)?;
            let mut tape = Tape::new();
            tape.bind(store, false)?;
            let xv = tape.constant(x);
            let (m, _) = self.encode_tape(&mut tape, xv, chunk.len())?;
            out.push(tape.value(m).clone());
        }
        Tensor::stack_rows(&out)
    }

    /// Normalized `[frames, joints, 3]` from one latent `[tokens, d_z]`.
    pub fn decode<F: Scalar>(&self, store: &ParamStore<F>, z: &Tensor<F>) -> Result<Tensor<F>> {
        let mut all = self.decode_batch(store, z, 1)?;
        Ok(all.remove(0))
    }

    /// Decodes `batch` stacked latents.
    pub fn decode_batch<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        z: &Tensor<F>,
        batch: usize,
    ) -> Result<Vec<Tensor<F>>> {
        let want = [batch * self.cfg.tokens, self.cfg.d_z];
        if z.shape() != want {
            return Err(Error::Shape {
                op: "vae_decode",
                lhs: z.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let mut tape = Tape::new();
        tape.bind(store, false)?;
        let zv = tape.constant(z.clone());
        let y = self.decode_tape(&mut tape, zv, batch)?;
        let y = tape.value(y).clone();
        (0..batch)
            .map(|b| self.unpatchify(y.rows(b * self.cfg.tokens, self.cfg.tokens)?))
            .collect()
    }
}

/// `z = mean + exp(logvar / 2) * eps`, `eps` drawn row-major.
pub fn reparameterize<F: Scalar>(
    mean: &Tensor<F>,
    logvar: &Tensor<F>,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    if mean.shape() != logvar.shape() {
        return Err(Error::Shape {
            op: "reparameterize",
            lhs: mean.shape().to_vec(),
            rhs: logvar.shape().to_vec(),
        });
    }
    let eps = rng.gaussian_tensor::<F>(mean.shape());
    let data = mean
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (lv * F::c(0.5)).exp() * e)
        .collect();
    Tensor::new(mean.shape().to_vec(), data)
}

/// `-0.5 * sum(1 + logvar - mean^2 - exp(logvar))`, divided by `batch`.
pub fn kl_divergence<F: Scalar>(mean: &Tensor<F>, logvar: &Tensor<F>, batch: usize) -> Result<f64> {
    if mean.shape() != logvar.shape() {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: mean.shape().to_vec(),
            rhs: logvar.shape().to_vec(),
        });
    }
    let s: f64 = mean
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            1.0 + lv - m * m - lv.exp()
        })
        .sum();
    Ok(-0.5 * s / batch as f64)
}

pub fn kl_tape<F: Scalar>(tape: &mut Tape<F>, mean: Var, logvar: Var, batch: usize) -> Result<Var> {
    let m2 = tape.mul(mean, mean)?;
    let e = tape.exp(logvar)?;
    let a = tape.add_const(logvar, Tensor::scalar(F::one()))?;
    let a = tape.sub(a, m2)?;
    let a = tape.sub(a, e)?;
    let s = tape.sum(a)?;
    tape.scale(s, -0.5 / batch as f64)
}

/// Full VAE objective on a batch of patch rows with fixed noise `eps`.
/// Returns `(total, recon, kl)`; `recon` sums squared error over a whole
/// sequence so the KL weight is relative to one sequence's error.
pub fn vae_loss<F: Scalar>(
    tape: &mut Tape<F>,
    vae: &Vae,
    x: Tensor<F>,
    eps: Tensor<F>,
    batch: usize,
    beta_kl: f64,
) -> Result<(Var, Var, Var)> {
    let xv = tape.constant(x);
    let (mean, lv) = vae.encode_tape(tape, xv, batch)?;
    let half = tape.scale(lv, 0.5)?;
    let sd = tape.exp(half)?;
    let ev = tape.constant(eps);
    let noise = tape.mul(sd, ev)?;
    let z = tape.add(mean, noise)?;
    let y = vae.decode_tape(tape, z, batch)?;
    let mse = tape.mse(y, xv)?;
    let recon = tape.scale(mse, (vae.cfg.tokens * vae.cfg.patch_dim()) as f64)?;
    let kl = kl_tape(tape, mean, lv, batch)?;
    let klw = tape.scale(kl, beta_kl)?;
    let total = tape.add(recon, klw)?;
    Ok((total, recon, kl))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub beta_kl: f64,
    pub adam: AdamConfig,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 32,
            beta_kl: 1e-3,
            adam: AdamConfig::default(),
        }
    }
}

pub struct VaeRun {
    pub params: ParamStore<f32>,
    pub log: TrainLog,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Normalized training motions of a corpus.
pub fn normalized(corpus: &Corpus, heldout: bool) -> Result<Vec<Tensor<f32>>> {
    let set = if heldout {
        &corpus.heldout
    } else {
        &corpus.train
    };
    set.iter()
        .map(|m| corpus.stats.normalize(&m.frames))
        .collect()
}

pub fn train_vae(
    vae: &Vae,
    corpus: &Corpus,
    cfg: &VaeTrainConfig,
    rng: &mut Rng,
) -> Result<VaeRun> {
    if cfg.batch == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let data = normalized(corpus, false)?;
    let mut params = vae.init::<f32>(rng)?;
    let mut adam = AdamState::new(cfg.adam);
    let mut log = TrainLog::default();
    let mut epoch_losses = Vec::new();
    'outer: for epoch in 0..cfg.epochs {
        let order = shuffled(data.len(), rng);
        let mut sum = 0.0;
        let mut n = 0;
        for idx in order.chunks(cfg.batch) {
            let x = vae.patchify(&idx.iter().map(|&i| &data[i]).collect::<Vec<_>>())?;
            let eps = rng.gaussian_tensor::<f32>(&[idx.len() * vae.cfg.tokens, vae.cfg.d_z]);
            let out = adam_step(&mut params, &[], &mut adam, |tape| {
                Ok(vae_loss(tape, vae, x, eps, idx.len(), cfg.beta_kl)?.0)
            })?;
            match out {
                StepOutcome::Loss(l) => {
                    log.losses.push(l);
                    sum += l;
                    n += 1;
                }
                StepOutcome::Diverged => {
                    log.diverged = Some(log.losses.len() + 1);
                    break 'outer;
                }
            }
        }
        epoch_losses.push(sum / n.max(1) as f64);
        log::debug!("vae epoch {} loss {:.5}", epoch + 1, sum / n.max(1) as f64);
    }
    Ok(VaeRun {
        params,
        log,
        epoch_losses,
    })
}

/// Per-coordinate MSE of posterior-mean reconstructions (normalized space).
pub fn reconstruction_mse(
    vae: &Vae,
    params: &ParamStore<f32>,
    motions: &[Tensor<f32>],
) -> Result<f64> {
    let refs: Vec<&Tensor<f32>> = motions.iter().collect();
    let means = vae.encode_means(params, &refs)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (b, chunk) in refs.chunks(64).enumerate() {
        let l = vae.cfg.tokens;
        let z = means.rows(b * 64 * l, chunk.len() * l)?;
        let recon = vae.decode_batch(params, &z, chunk.len())?;
        for (r, m) in recon.iter().zip(chunk) {
            total += r
                .data()
                .iter()
                .zip(m.data())
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum::<f64>();
            n += r.len();
        }
    }
    Ok(total / n as f64)
}
