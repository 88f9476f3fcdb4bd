use serde::{Deserialize, Serialize};

use super::kernels::recurrent_head;
use crate::error::{Error, Result};
use crate::nn::{repeat_rows, Linear, Norm};
use crate::numerics::{CustomOp, ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Gate pre-activations are clamped to this range so that
/// `sigmoid(x)^(1/tau)` stays strictly inside `(0, 1)` in 32-bit.
const GATE_PREACT_LIMIT: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub mlp_hidden: usize,
    /// Width of the conditioning vector; 0 disables scale-shift modulation.
    pub d_cond: usize,
    /// Sigmoid temperature of the decay gates.
    pub gate_temperature: f64,
}

impl BlockConfig {
    pub fn new(d_model: usize, heads: usize, d_cond: usize) -> Self {
        let d = d_model / heads;
        Self {
            d_model,
            heads,
            d_k: d,
            d_v: d,
            mlp_hidden: 2 * d_model,
            d_cond,
            gate_temperature: 16.0,
        }
    }
}

/// Pre-norm transformer block whose token mixer is gated linear attention.
#[derive(Clone, Debug, PartialEq)]
pub struct GlaBlock {
    pub cfg: BlockConfig,
    ln1: Norm,
    ln2: Norm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wa: Linear,
    wo: Linear,
    w1: Linear,
    w2: Linear,
    modulation: Option<Linear>,
}

impl GlaBlock {
    pub fn new(prefix: &str, cfg: BlockConfig) -> Result<Self> {
        if cfg.heads * cfg.d_v != cfg.d_model {
            return Err(Error::contract(format!(
                "d_model {} != heads {} * d_v {}",
                cfg.d_model, cfg.heads, cfg.d_v
            )));
        }
        let (d, hk, hv) = (cfg.d_model, cfg.heads * cfg.d_k, cfg.heads * cfg.d_v);
        Ok(Self {
            cfg,
            ln1: Norm::new(&format!("{prefix}.ln1"), d),
            ln2: Norm::new(&format!("{prefix}.ln2"), d),
            wq: Linear::new(&format!("{prefix}.wq"), d, hk),
            wk: Linear::new(&format!("{prefix}.wk"), d, hk),
            wv: Linear::new(&format!("{prefix}.wv"), d, hv),
            wa: Linear::new(&format!("{prefix}.wa"), d, hk),
            wo: Linear::new(&format!("{prefix}.wo"), hv, d),
            w1: Linear::new(&format!("{prefix}.w1"), d, cfg.mlp_hidden),
            w2: Linear::new(&format!("{prefix}.w2"), cfg.mlp_hidden, d),
            modulation: (cfg.d_cond > 0)
                .then(|| Linear::new(&format!("{prefix}.mod"), cfg.d_cond, 4 * d)),
        })
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut Rng) -> Result<()> {
        self.ln1.init(store)?;
        self.wq.init(store, rng, 1.0)?;
        self.wk.init(store, rng, 1.0)?;
        self.wv.init(store, rng, 1.0)?;
        self.wa.init(store, rng, 1.0)?;
        self.wo.init(store, rng, 0.5)?;
        self.ln2.init(store)?;
        self.w1.init(store, rng, 1.0)?;
        self.w2.init(store, rng, 0.5)?;
        if let Some(m) = &self.modulation {
            m.init(store, rng, 1.0)?;
            m.zero(store)?;
        }
        Ok(())
    }

    /// Zero both residual output projections, making the block an identity.
    pub fn zero_outputs<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        self.wo.zero(store)?;
        self.w2.zero(store)
    }

    /// `x: [batch * seq_len, d_model]`, `cond: [batch, d_cond]`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        cond: Option<Var>,
        batch: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let c = &self.cfg;
        let xs = tape.value(x).shape().to_vec();
        if xs != [batch * seq_len, c.d_model] {
            return Err(Error::Shape {
                op: "gla_block",
                lhs: xs,
                rhs: vec![batch * seq_len, c.d_model],
            });
        }
        let mods = match (&self.modulation, cond) {
            (Some(m), Some(cv)) => {
                let cs = tape.value(cv).shape().to_vec();
                if cs != [batch, c.d_cond] {
                    return Err(Error::contract(format!(
                        "conditioning shape {cs:?}, expected [{batch}, {}]",
                        c.d_cond
                    )));
                }
                let m = m.forward(tape, cv)?;
                let mt = tape.gather_rows(m, &repeat_rows(batch, seq_len))?;
                let d = c.d_model;
                let parts = (0..4)
                    .map(|i| tape.slice(mt, 1, i * d, d))
                    .collect::<Result<Vec<_>>>()?;
                Some(parts)
            }
            (None, None) => None,
            (Some(_), None) => {
                return Err(Error::contract("block expects a conditioning vector"));
            }
            (None, Some(_)) => {
                return Err(Error::contract("block has no conditioning input"));
            }
        };
        let modulate = |tape: &mut Tape<F>, h: Var, shift: Option<Var>, scale: Option<Var>| match (
            shift, scale,
        ) {
            (Some(sh), Some(sc)) => {
                let hs = tape.mul(h, sc)?;
                let h = tape.add(h, hs)?;
                tape.add(h, sh)
            }
            _ => Ok(h),
        };
        let m = |i: usize| mods.as_ref().map(|p| p[i]);

        let h = self.ln1.forward(tape, x)?;
        let h = modulate(tape, h, m(0), m(1))?;
        let q = self.wq.forward(tape, h)?;
        let q = tape.scale(q, 1.0 / (c.d_k as f64).sqrt())?;
        let k = self.wk.forward(tape, h)?;
        let v = self.wv.forward(tape, h)?;
        let a = self.wa.forward(tape, h)?;
        let a = tape.clamp(a, -GATE_PREACT_LIMIT, GATE_PREACT_LIMIT)?;
        let a = tape.sigmoid(a)?;
        let a = tape.log(a)?;
        let a = tape.scale(a, 1.0 / c.gate_temperature)?;
        let alpha = tape.exp(a)?;
        let o = gla_attention(
            tape,
            [q, k, v, alpha],
            batch,
            seq_len,
            c.heads,
            c.d_k,
            c.d_v,
        )?;
        let o = self.wo.forward(tape, o)?;
        let x1 = tape.add(x, o)?;

        let h = self.ln2.forward(tape, x1)?;
        let h = modulate(tape, h, m(2), m(3))?;
        let h = self.w1.forward(tape, h)?;
        let h = tape.gelu(h)?;
        let h = self.w2.forward(tape, h)?;
        tape.add(x1, h)
    }
}

struct GlaOp<F> {
    dims: (usize, usize, usize, usize, usize),
    /// `S_t` for every (batch, head, t).
    states: Vec<F>,
}

/// Batched gated linear attention recorded as a single tape node.
///
/// `q, k, alpha: [batch * seq_len, heads * d_k]`, `v: [batch * seq_len, heads * d_v]`.
pub fn gla_attention<F: Scalar>(
    tape: &mut Tape<F>,
    [q, k, v, alpha]: [Var; 4],
    batch: usize,
    seq_len: usize,
    heads: usize,
    d_k: usize,
    d_v: usize,
) -> Result<Var> {
    let rows = batch * seq_len;
    for (var, w) in [(q, d_k), (k, d_k), (alpha, d_k), (v, d_v)] {
        let s = tape.value(var).shape();
        if s != [rows, heads * w] {
            return Err(Error::Shape {
                op: "gla",
                lhs: s.to_vec(),
                rhs: vec![rows, heads * w],
            });
        }
    }
    // Gate saturation at exactly 1 is tolerated here; it only removes decay.
    if tape
        .value(alpha)
        .data()
        .iter()
        .any(|&a| !(a > F::zero() && a <= F::one()))
    {
        return Err(Error::contract("gla gates must lie in (0, 1]"));
    }
    let nk = seq_len * heads * d_k;
    let nv = seq_len * heads * d_v;
    let mut out = vec![F::zero(); rows * heads * d_v];
    let mut states = vec![F::zero(); batch * heads * seq_len * d_k * d_v];
    let per = seq_len * d_k * d_v;
    {
        let (qd, kd, vd, ad) = (
            tape.value(q).data(),
            tape.value(k).data(),
            tape.value(v).data(),
            tape.value(alpha).data(),
        );
        for b in 0..batch {
            for h in 0..heads {
                let sb = (b * heads + h) * per;
                recurrent_head(
                    &qd[b * nk..(b + 1) * nk],
                    &kd[b * nk..(b + 1) * nk],
                    &vd[b * nv..(b + 1) * nv],
                    &ad[b * nk..(b + 1) * nk],
                    (seq_len, heads, d_k, d_v),
                    h,
                    &mut out[b * nv..(b + 1) * nv],
                    Some(&mut states[sb..sb + per]),
                );
            }
        }
    }
    let value = Tensor::new(vec![rows, heads * d_v], out)?;
    let op = GlaOp {
        dims: (batch, seq_len, heads, d_k, d_v),
        states,
    };
    tape.custom(&[q, k, v, alpha], value, Box::new(op))
}

impl<F: Scalar> CustomOp<F> for GlaOp<F> {
    fn name(&self) -> &'static str {
        "gla"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (batch, seq_len, heads, dk, dv) = self.dims;
        let (q, k, v, a) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
        );
        let g = grad.data();
        let mut dq = vec![F::zero(); q.len()];
        let mut dk_ = vec![F::zero(); k.len()];
        let mut dv_ = vec![F::zero(); v.len()];
        let mut da = vec![F::zero(); a.len()];
        let mut ds = vec![F::zero(); dk * dv];
        let per = seq_len * dk * dv;
        for b in 0..batch {
            for h in 0..heads {
                ds.fill(F::zero());
                let st = &self.states[(b * heads + h) * per..(b * heads + h + 1) * per];
                for t in (0..seq_len).rev() {
                    let row = b * seq_len + t;
                    let ik = (row * heads + h) * dk;
                    let iv = (row * heads + h) * dv;
                    let s_t = &st[t * dk * dv..(t + 1) * dk * dv];
                    let go = &g[iv..iv + dv];
                    for i in 0..dk {
                        let srow = &s_t[i * dv..(i + 1) * dv];
                        dq[ik + i] = srow.iter().zip(go).map(|(&s, &o)| s * o).sum();
                        let qi = q[ik + i];
                        let dsr = &mut ds[i * dv..(i + 1) * dv];
                        for (d, &o) in dsr.iter_mut().zip(go) {
                            *d += qi * o;
                        }
                    }
                    for i in 0..dk {
                        let dsr = &ds[i * dv..(i + 1) * dv];
                        dk_[ik + i] = dsr.iter().zip(&v[iv..iv + dv]).map(|(&d, &x)| d * x).sum();
                        for (j, &d) in dsr.iter().enumerate() {
                            dv_[iv + j] += d * k[ik + i];
                        }
                        if t > 0 {
                            let prev =
                                &st[(t - 1) * dk * dv + i * dv..(t - 1) * dk * dv + (i + 1) * dv];
                            da[ik + i] = dsr.iter().zip(prev).map(|(&d, &p)| d * p).sum();
                        }
                    }
                    for i in 0..dk {
                        let ai = a[ik + i];
                        for d in &mut ds[i * dv..(i + 1) * dv] {
                            *d *= ai;
                        }
                    }
                }
            }
        }
        let t = |shape: &[usize], d: Vec<F>| Tensor::new(shape.to_vec(), d).map(Some);
        Ok(vec![
            t(inputs[0].shape(), dq)?,
            t(inputs[1].shape(), dk_)?,
            t(inputs[2].shape(), dv_)?,
            t(inputs[3].shape(), da)?,
        ])
    }
}
