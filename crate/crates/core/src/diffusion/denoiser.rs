use serde::{Deserialize, Serialize};

use crate::attention::{BlockConfig, GlaBlock};
use crate::error::{Error, Result};
use crate::motion::Vocab;
use crate::nn::{init_table, sinusoidal, tile_rows, Linear, Norm};
use crate::numerics::{ParamStore, Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub tokens: usize,
    pub d_z: usize,
    pub d_model: usize,
    pub heads: usize,
    pub labels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            d_z: 16,
            d_model: 64,
            heads: 4,
            labels: Vocab::len(),
        }
    }
}

/// Clean-latent predictor: four GLA blocks with U-Net skips (1 to 4, 2 to 3)
/// conditioned on time and label through per-block scale-shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub prefix: String,
    embed: Linear,
    time1: Linear,
    time2: Linear,
    pub blocks: Vec<GlaBlock>,
    fuse23: Linear,
    fuse14: Linear,
    norm_out: Norm,
    head: Linear,
}

/// Embedded input tokens and the per-sequence conditioning vector.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub x: Var,
    pub cond: Var,
    pub batch: usize,
}

impl Denoiser {
    pub fn new(prefix: &str, cfg: DenoiserConfig) -> Result<Self> {
        let d = cfg.d_model;
        let bc = BlockConfig::new(d, cfg.heads, d);
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
            embed: Linear::new(&p("embed"), cfg.d_z, d),
            time1: Linear::new(&p("time1"), d, d),
            time2: Linear::new(&p("time2"), d, d),
            blocks: (0..4)
                .map(|i| GlaBlock::new(&p(&format!("block{i}")), bc))
                .collect::<Result<_>>()?,
            fuse23: Linear::new(&p("fuse23"), 2 * d, d),
            fuse14: Linear::new(&p("fuse14"), 2 * d, d),
            norm_out: Norm::new(&p("norm_out"), d),
            head: Linear::new(&p("head"), d, cfg.d_z),
        })
    }

    pub fn init<F: Scalar>(&self, rng: &mut Rng) -> Result<ParamStore<F>> {
        let mut s = ParamStore::new();
        let (d, c) = (self.cfg.d_model, &self.cfg);
        self.embed.init(&mut s, rng, 1.0)?;
        init_table(
            &mut s,
            &format!("{}.pos", self.prefix),
            c.tokens,
            d,
            0.1,
            rng,
        )?;
        self.time1.init(&mut s, rng, 1.0)?;
        self.time2.init(&mut s, rng, 1.0)?;
        init_table(
            &mut s,
            &format!("{}.label", self.prefix),
            c.labels,
            d,
            1.0,
            rng,
        )?;
        for b in &self.blocks {
            b.init(&mut s, rng)?;
        }
        self.fuse23.init(&mut s, rng, 1.0)?;
        self.fuse14.init(&mut s, rng, 1.0)?;
        self.norm_out.init(&mut s)?;
        self.head.init(&mut s, rng, 1.0)?;
        Ok(s)
    }

    /// `z: [batch * tokens, d_z]`; one timestep and label per sequence.
    pub fn embed<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        z: Var,
        ts: &[usize],
        labels: &[usize],
    ) -> Result<Embedded> {
        let c = &self.cfg;
        let batch = ts.len();
        if labels.len() != batch {
            return Err(Error::contract(format!(
                "{} timesteps but {} labels",
                batch,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c.labels) {
            return Err(Error::contract(format!(
                "label index {bad} outside 0..{}",
                c.labels
            )));
        }
        let want = [batch * c.tokens, c.d_z];
        if tape.value(z).shape() != want {
            return Err(Error::Shape {
                op: "denoise",
                lhs: tape.value(z).shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let x = self.embed.forward(tape, z)?;
        let pos = tape.param(&format!("{}.pos", self.prefix))?;
        let pos = tape.gather_rows(pos, &tile_rows(batch, c.tokens))?;
        let x = tape.add(x, pos)?;
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let te = tape.constant(sinusoidal::<F>(&tf, c.d_model)?);
        let te = self.time1.forward(tape, te)?;
        let te = tape.gelu(te)?;
        let te = self.time2.forward(tape, te)?;
        let table = tape.param(&format!("{}.label", self.prefix))?;
        let le = tape.gather_rows(table, labels)?;
        let cond = tape.add(te, le)?;
        Ok(Embedded { x, cond, batch })
    }

    pub fn block<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        i: usize,
        h: Var,
        e: &Embedded,
    ) -> Result<Var> {
        self.blocks[i].forward(tape, h, Some(e.cond), e.batch, self.cfg.tokens)
    }

    /// Blocks 3 and 4, both skips, and the output head.
    pub fn finish<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        h1: Var,
        h2: Var,
        e: &Embedded,
    ) -> Result<Var> {
        let h3 = self.block(tape, 2, h2, e)?;
        let h3 = tape.concat(&[h3, h2], 1)?;
        let h3 = self.fuse23.forward(tape, h3)?;
        let h4 = self.block(tape, 3, h3, e)?;
        let h4 = tape.concat(&[h4, h1], 1)?;
        let h4 = self.fuse14.forward(tape, h4)?;
        let h = self.norm_out.forward(tape, h4)?;
        self.head.forward(tape, h)
    }

    pub fn forward_tape<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        z: Var,
        ts: &[usize],
        labels: &[usize],
    ) -> Result<Var> {
        let e = self.embed(tape, z, ts, labels)?;
        let h1 = self.block(tape, 0, e.x, &e)?;
        let h2 = self.block(tape, 1, h1, &e)?;
        self.finish(tape, h1, h2, &e)
    }

    /// Batched `x0` prediction without recording gradients.
    pub fn predict<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        z: &Tensor<F>,
        ts: &[usize],
        labels: &[usize],
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        tape.bind(params, false)?;
        let zv = tape.constant(z.clone());
        let y = self.forward_tape(&mut tape, zv, ts, labels)?;
        Ok(tape.value(y).clone())
    }

    /// Single-sequence `denoise(z_t, t, label)`.
    pub fn denoise<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        z_t: &Tensor<F>,
        t: usize,
        label: usize,
    ) -> Result<Tensor<F>> {
        self.predict(params, z_t, &[t], &[label])
    }
}
