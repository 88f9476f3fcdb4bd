//! Latent consistency distillation and few-step sampling.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    cfg_combine, ddim_step_rows, initial_noise, q_sample_rows, Denoiser, LatentModel, LatentSet,
    NoiseSchedule, SampleOutput,
};
use crate::error::{Error, Result};
use crate::motion::Vocab;
use crate::numerics::{AdamConfig, AdamState, ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::train::{adam_step, draw_batch, StepOutcome, TrainLog};

/// `c_skip(t) = s^2 / (t_s^2 + s^2)`, `c_out(t) = t_s / sqrt(t_s^2 + s^2)`,
/// `t_s = t * time_scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCoeffs {
    pub sigma_d: f64,
    pub time_scale: f64,
}

impl BoundaryCoeffs {
    pub fn new(t_diff: usize) -> Self {
        Self {
            sigma_d: 0.5,
            time_scale: 10.0 / t_diff as f64,
        }
    }

    pub fn c_skip(&self, t: usize) -> f64 {
        let ts = t as f64 * self.time_scale;
        let s2 = self.sigma_d * self.sigma_d;
        s2 / (ts * ts + s2)
    }

    pub fn c_out(&self, t: usize) -> f64 {
        let ts = t as f64 * self.time_scale;
        ts / (ts * ts + self.sigma_d * self.sigma_d).sqrt()
    }
}

/// `f = c_skip(t) * z + c_out(t) * F`, with `f(z, 0) = z` exactly.
pub fn consistency_apply<F: Scalar>(
    f_out: &Tensor<F>,
    z: &Tensor<F>,
    t: usize,
    c: &BoundaryCoeffs,
) -> Result<Tensor<F>> {
    if f_out.shape() != z.shape() {
        return Err(Error::Shape {
            op: "consistency_apply",
            lhs: f_out.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    if t == 0 {
        return Ok(z.clone());
    }
    let (a, b) = (c.c_skip(t), c.c_out(t));
    z.zip_map(f_out, |zv, fv| F::c(a * zv.as_f64() + b * fv.as_f64()))
}

/// Per-row coefficient tensors for a batch with one timestep per sequence.
fn coeff_rows<F: Scalar>(
    c: &BoundaryCoeffs,
    ts: &[usize],
    rows: usize,
    width: usize,
) -> (Tensor<F>, Tensor<F>) {
    let mut skip = Vec::with_capacity(ts.len() * rows * width);
    let mut out = Vec::with_capacity(ts.len() * rows * width);
    for &t in ts {
        let (a, b) = if t == 0 {
            (1.0, 0.0)
        } else {
            (c.c_skip(t), c.c_out(t))
        };
        skip.extend(std::iter::repeat_n(F::c(a), rows * width));
        out.extend(std::iter::repeat_n(F::c(b), rows * width));
    }
    let shape = vec![ts.len() * rows, width];
    (
        Tensor::new(shape.clone(), skip).expect("shape"),
        Tensor::new(shape, out).expect("shape"),
    )
}

/// Consistency function on the tape; `z` is a constant input.
pub fn consistency_tape<F: Scalar>(
    tape: &mut Tape<F>,
    den: &Denoiser,
    z: &Tensor<F>,
    ts: &[usize],
    labels: &[usize],
    c: &BoundaryCoeffs,
) -> Result<Var> {
    let zv = tape.constant(z.clone());
    let f = den.forward_tape(tape, zv, ts, labels)?;
    let (skip, out) = coeff_rows::<F>(c, ts, den.cfg.tokens, den.cfg.d_z);
    let fo = tape.mul_const(f, out)?;
    let zs = z.zip_map(&skip, |a, b| a * b)?;
    tape.add_const(fo, zs)
}

/// Online or target network wrapped with the boundary parameterization.
pub struct ConsistencyModel<'a> {
    pub den: &'a Denoiser,
    pub params: &'a ParamStore<f32>,
    pub coeffs: BoundaryCoeffs,
}

impl ConsistencyModel<'_> {
    pub fn apply(&self, z: &Tensor<f32>, ts: &[usize], labels: &[usize]) -> Result<Tensor<f32>> {
        let f = self.den.predict(self.params, z, ts, labels)?;
        apply_rows(&f, z, ts, &self.coeffs)
    }
}

pub fn apply_rows(
    f: &Tensor<f32>,
    z: &Tensor<f32>,
    ts: &[usize],
    c: &BoundaryCoeffs,
) -> Result<Tensor<f32>> {
    let per = z.len() / ts.len();
    let parts = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let rows = per / z.shape()[1];
            consistency_apply(&f.rows(i * rows, rows)?, &z.rows(i * rows, rows)?, t, c)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_rows(&parts)
}

impl LatentModel for ConsistencyModel<'_> {
    fn predict(
        &self,
        z: &Tensor<f32>,
        ts: &[usize],
        labels: &[usize],
        _: &[usize],
    ) -> Result<Tensor<f32>> {
        self.apply(z, ts, labels)
    }
}

/// One guided teacher prediction followed by a DDIM step, per sequence.
pub fn teacher_solve(
    teacher: &dyn LatentModel,
    z_t: &Tensor<f32>,
    ts: &[usize],
    t_prev: &[usize],
    labels: &[usize],
    w: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let n = ts.len();
    let rows = z_t.shape()[0] / n.max(1);
    let zz = Tensor::stack_rows(&[z_t.clone(), z_t.clone()])?;
    let mut tt = ts.to_vec();
    tt.extend_from_slice(ts);
    let mut ll = labels.to_vec();
    ll.extend(std::iter::repeat_n(Vocab::NULL, n));
    let samples: Vec<usize> = (0..n).chain(0..n).collect();
    let x0 = teacher.predict(&zz, &tt, &ll, &samples)?;
    let guided = cfg_combine(&x0.rows(0, n * rows)?, &x0.rows(n * rows, n * rows)?, w)?;
    ddim_step_rows(z_t, &guided, ts, t_prev, sched)
}

/// `target <- mu * target + (1 - mu) * online`.
pub fn ema_update(target: &mut ParamStore<f32>, online: &ParamStore<f32>, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::contract(format!("ema rate {mu} outside [0, 1]")));
    }
    if target.names() != online.names() {
        return Err(Error::contract("ema target and online layouts differ"));
    }
    for ((_, t), (_, o)) in target.iter_mut().zip(online.iter()) {
        if t.shape() != o.shape() {
            return Err(Error::Shape {
                op: "ema_update",
                lhs: t.shape().to_vec(),
                rhs: o.shape().to_vec(),
            });
        }
        for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
            *a = (mu * *a as f64 + (1.0 - mu) * b as f64) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub skip: usize,
    pub ema: f64,
    pub guidance: f64,
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            skip: 5,
            ema: 0.95,
            guidance: 2.0,
            steps: 2000,
            batch: 32,
            adam: AdamConfig::default(),
        }
    }
}

/// One distillation batch: the noisy input, its timesteps, and the
/// stop-gradient target `f_target(teacher_solve(z_{n+k}), n)`.
pub struct DistillBatch {
    pub z_t: Tensor<f32>,
    pub ts: Vec<usize>,
    pub labels: Vec<usize>,
    pub target: Tensor<f32>,
}

/// Draw order: batch indices, `n` per sequence, then noise.
#[allow(clippy::too_many_arguments)]
pub fn distill_batch(
    data: &LatentSet,
    teacher: &dyn LatentModel,
    target: &ConsistencyModel,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    rng: &mut Rng,
) -> Result<DistillBatch> {
    if cfg.skip < 1 || cfg.skip >= sched.t_diff {
        return Err(Error::contract(format!(
            "skip interval {} outside 1..{}",
            cfg.skip, sched.t_diff
        )));
    }
    let idx = draw_batch(data.len(), cfg.batch, rng);
    let ns: Vec<usize> = (0..cfg.batch)
        .map(|_| rng.below(sched.t_diff - cfg.skip + 1))
        .collect();
    let ts: Vec<usize> = ns.iter().map(|n| n + cfg.skip).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let z0 = data.batch(&idx)?;
    let eps = rng.gaussian_tensor::<f32>(z0.shape());
    let z_t = q_sample_rows(&z0, &ts, &eps, sched)?;
    let solved = teacher_solve(teacher, &z_t, &ts, &ns, &labels, cfg.guidance, sched)?;
    let tgt = target.apply(&solved, &ns, &labels)?;
    Ok(DistillBatch {
        z_t,
        ts,
        labels,
        target: tgt,
    })
}

/// Squared L2 distance per sequence, averaged over the batch.
pub fn distill_loss<F: Scalar>(
    tape: &mut Tape<F>,
    online: &Denoiser,
    z_t: &Tensor<F>,
    ts: &[usize],
    labels: &[usize],
    target: &Tensor<F>,
    coeffs: &BoundaryCoeffs,
) -> Result<Var> {
    let f = consistency_tape(tape, online, z_t, ts, labels, coeffs)?;
    let tv = tape.constant(target.clone());
    let d = tape.sub(f, tv)?;
    let d2 = tape.mul(d, d)?;
    let s = tape.sum(d2)?;
    tape.scale(s, 1.0 / ts.len() as f64)
}

pub struct DistillRun {
    pub online: ParamStore<f32>,
    pub target: ParamStore<f32>,
    pub log: TrainLog,
}

/// Online and target networks start from the teacher weights.
pub fn train_distill(
    den: &Denoiser,
    teacher_params: &ParamStore<f32>,
    data: &LatentSet,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    rng: &mut Rng,
) -> Result<DistillRun> {
    if !(0.0..=1.0).contains(&cfg.ema) {
        return Err(Error::contract(format!(
            "ema rate {} outside [0, 1]",
            cfg.ema
        )));
    }
    let coeffs = BoundaryCoeffs::new(sched.t_diff);
    let teacher = crate::diffusion::TeacherModel {
        den,
        params: teacher_params,
    };
    let mut online = teacher_params.clone();
    let mut target = teacher_params.clone();
    let mut adam = AdamState::new(cfg.adam);
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let batch = {
            let tm = ConsistencyModel {
                den,
                params: &target,
                coeffs,
            };
            distill_batch(data, &teacher, &tm, sched, cfg, rng)?
        };
        let out = adam_step(&mut online, &[], &mut adam, |tape| {
            distill_loss(
                tape,
                den,
                &batch.z_t,
                &batch.ts,
                &batch.labels,
                &batch.target,
                &coeffs,
            )
        })?;
        match out {
            StepOutcome::Loss(l) => log.losses.push(l),
            StepOutcome::Diverged => {
                log.diverged = Some(step);
                break;
            }
        }
        ema_update(&mut target, &online, cfg.ema)?;
        if step % 250 == 0 {
            log::debug!("distill step {step} loss {:.5}", log.losses[step - 1]);
        }
    }
    Ok(DistillRun {
        online,
        target,
        log,
    })
}

/// Multistep consistency sampling over `n_steps` evenly spaced time points.
pub fn sample_lcm(
    model: &dyn LatentModel,
    sched: &NoiseSchedule,
    labels: &[usize],
    rngs: &mut [Rng],
    n_steps: usize,
    tokens: usize,
    d_z: usize,
) -> Result<SampleOutput> {
    if n_steps < 1 {
        return Err(Error::contract("lcm sampling needs at least one step"));
    }
    if labels.len() != rngs.len() || labels.is_empty() {
        return Err(Error::contract("one rng per requested sample"));
    }
    let n = labels.len();
    let grid = sched.grid(n_steps)?;
    let samples: Vec<usize> = (0..n).collect();
    let mut z = initial_noise(rngs, tokens, d_z)?;
    let mut evals = vec![0usize; n];
    let mut trajectory = Vec::new();
    let mut x0 = z.clone();
    for i in 0..n_steps {
        let t = grid[i];
        x0 = model.predict(&z, &vec![t; n], labels, &samples)?;
        evals.iter_mut().for_each(|e| *e += 1);
        trajectory.push(x0.clone());
        if i + 1 < n_steps {
            let parts = rngs
                .iter_mut()
                .map(|r| r.gaussian_tensor::<f32>(&[tokens, d_z]))
                .collect::<Vec<_>>();
            let eps = Tensor::stack_rows(&parts)?;
            z = q_sample_rows(&x0, &vec![grid[i + 1]; n], &eps, sched)?;
        }
    }
    Ok(SampleOutput {
        latents: x0,
        evals,
        trajectory,
    })
}
