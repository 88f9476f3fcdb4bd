//! Gated linear attention kernels.
//!
//! Per head the reference semantics are the recurrence
//!
//! ```text
//! S_t = Diag(alpha_t) S_{t-1} + k_t v_t^T,   S_0 = 0
//! o_t[j] = sum_i q_t[i] S_t[i, j]
//! ```
//!
//! The quadratic and chunked forms regroup the same sum. Decay between two
//! positions is always formed as a running product of the gates in between,
//! never as a ratio of global cumulative products, so neither form can
//! overflow or divide by an underflowed product.

use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Inputs laid out `[T, H, d]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnInputs<F> {
    pub seq_len: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// Gates, same layout as `q`, each strictly inside `(0, 1)`.
    pub alpha: Vec<F>,
}

impl<F: Scalar> AttnInputs<F> {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.heads == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::contract("attention dims must be positive"));
        }
        let nk = self.seq_len * self.heads * self.d_k;
        let nv = self.seq_len * self.heads * self.d_v;
        for (name, len, want) in [
            ("q", self.q.len(), nk),
            ("k", self.k.len(), nk),
            ("alpha", self.alpha.len(), nk),
            ("v", self.v.len(), nv),
        ] {
            if len != want {
                return Err(Error::contract(format!(
                    "{name} has {len} entries, expected {want}"
                )));
            }
        }
        check_gates(&self.alpha)
    }

    pub fn cast<G: Scalar>(&self) -> AttnInputs<G> {
        let c = |v: &[F]| v.iter().map(|x| G::c(x.as_f64())).collect();
        AttnInputs {
            seq_len: self.seq_len,
            heads: self.heads,
            d_k: self.d_k,
            d_v: self.d_v,
            q: c(&self.q),
            k: c(&self.k),
            v: c(&self.v),
            alpha: c(&self.alpha),
        }
    }

    /// Gaussian `q, k, v` with `q` scaled by `d_k^-1/2`, gates uniform in
    /// `[gate_lo, gate_hi]`. Draw order: q, k, v, alpha.
    pub fn random(
        rng: &mut crate::numerics::Rng,
        seq_len: usize,
        heads: usize,
        d_k: usize,
        d_v: usize,
        (gate_lo, gate_hi): (f64, f64),
    ) -> Self {
        let nk = seq_len * heads * d_k;
        let nv = seq_len * heads * d_v;
        let qs = 1.0 / (d_k as f64).sqrt();
        let q = (0..nk).map(|_| F::c(rng.gaussian() * qs)).collect();
        let k = (0..nk).map(|_| F::c(rng.gaussian())).collect();
        let v = (0..nv).map(|_| F::c(rng.gaussian())).collect();
        let alpha = (0..nk)
            .map(|_| F::c(rng.uniform_in(gate_lo, gate_hi)))
            .collect();
        Self {
            seq_len,
            heads,
            d_k,
            d_v,
            q,
            k,
            v,
            alpha,
        }
    }

    fn out_len(&self) -> usize {
        self.seq_len * self.heads * self.d_v
    }
}

fn check_gates<F: Scalar>(alpha: &[F]) -> Result<()> {
    match alpha.iter().position(|&a| !(a > F::zero() && a < F::one())) {
        Some(i) => Err(Error::contract(format!(
            "gate {i} = {} outside (0, 1)",
            alpha[i]
        ))),
        None => Ok(()),
    }
}

/// Running per-head state `[H, d_k, d_v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayState<F> {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub s: Vec<F>,
    pub t: usize,
}

impl<F: Scalar> DecayState<F> {
    pub fn zeros(heads: usize, d_k: usize, d_v: usize) -> Self {
        Self {
            heads,
            d_k,
            d_v,
            s: vec![F::zero(); heads * d_k * d_v],
            t: 0,
        }
    }
}

/// Chunk size for the chunked form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunk: usize,
}

impl Default for ChunkPlan {
    fn default() -> Self {
        Self { chunk: 16 }
    }
}

impl ChunkPlan {
    pub fn new(chunk: usize) -> Self {
        Self { chunk }
    }

    /// Chunk boundaries `[start, end)` partitioning `0..seq_len`.
    pub fn boundaries(&self, seq_len: usize) -> Vec<(usize, usize)> {
        (0..seq_len)
            .step_by(self.chunk.max(1))
            .map(|s| (s, (s + self.chunk).min(seq_len)))
            .collect()
    }
}

/// One recurrent step over all heads; `q, k, alpha` are `[H, d_k]`, `v` is
/// `[H, d_v]`. Returns `o` as `[H, d_v]` and advances the state.
pub fn gla_recurrent_step<F: Scalar>(
    state: &mut DecayState<F>,
    q: &[F],
    k: &[F],
    v: &[F],
    alpha: &[F],
) -> Result<Vec<F>> {
    let (h, dk, dv) = (state.heads, state.d_k, state.d_v);
    if q.len() != h * dk || k.len() != h * dk || alpha.len() != h * dk || v.len() != h * dv {
        return Err(Error::contract(format!(
            "step inputs do not match state dims H={h} d_k={dk} d_v={dv}"
        )));
    }
    if state.s.len() != h * dk * dv {
        return Err(Error::contract("state buffer has wrong size"));
    }
    check_gates(alpha)?;
    let mut o = vec![F::zero(); h * dv];
    for head in 0..h {
        let s = &mut state.s[head * dk * dv..(head + 1) * dk * dv];
        let (qh, kh, ah) = (
            &q[head * dk..(head + 1) * dk],
            &k[head * dk..(head + 1) * dk],
            &alpha[head * dk..(head + 1) * dk],
        );
        let vh = &v[head * dv..(head + 1) * dv];
        step_head(s, qh, kh, vh, ah, &mut o[head * dv..(head + 1) * dv], dv);
    }
    state.t += 1;
    Ok(o)
}

#[inline]
fn step_head<F: Scalar>(s: &mut [F], q: &[F], k: &[F], v: &[F], a: &[F], o: &mut [F], dv: usize) {
    for (i, row) in s.chunks_mut(dv).enumerate() {
        let (ai, ki, qi) = (a[i], k[i], q[i]);
        for ((sij, &vj), oj) in row.iter_mut().zip(v).zip(o.iter_mut()) {
            *sij = ai * *sij + ki * vj;
            *oj += qi * *sij;
        }
    }
}

/// Index helpers for `[T, H, d]` layout.
#[inline]
fn at(t: usize, h: usize, heads: usize, d: usize) -> usize {
    (t * heads + h) * d
}

/// Recurrent form over one head of one sequence. When `states` is given it
/// receives `S_t` for every `t` (`T * d_k * d_v` entries).
#[allow(clippy::too_many_arguments)]
pub(crate) fn recurrent_head<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    alpha: &[F],
    (seq_len, heads, dk, dv): (usize, usize, usize, usize),
    head: usize,
    out: &mut [F],
    mut states: Option<&mut [F]>,
) {
    let mut s = vec![F::zero(); dk * dv];
    for t in 0..seq_len {
        let ik = at(t, head, heads, dk);
        let iv = at(t, head, heads, dv);
        step_head(
            &mut s,
            &q[ik..ik + dk],
            &k[ik..ik + dk],
            &v[iv..iv + dv],
            &alpha[ik..ik + dk],
            &mut out[iv..iv + dv],
            dv,
        );
        if let Some(st) = states.as_deref_mut() {
            st[t * dk * dv..(t + 1) * dk * dv].copy_from_slice(&s);
        }
    }
}

pub fn gla_forward_recurrent<F: Scalar>(x: &AttnInputs<F>) -> Result<Vec<F>> {
    x.validate()?;
    let mut out = vec![F::zero(); x.out_len()];
    let dims = (x.seq_len, x.heads, x.d_k, x.d_v);
    for h in 0..x.heads {
        recurrent_head(&x.q, &x.k, &x.v, &x.alpha, dims, h, &mut out, None);
    }
    Ok(out)
}

/// Intra-window quadratic accumulation for positions `start..end`:
/// `o_t += sum_{start<=s<=t} (sum_i q_t[i] k_s[i] prod_{s<u<=t} alpha_u[i]) v_s`.
fn quadratic_window<F: Scalar>(
    x: &AttnInputs<F>,
    head: usize,
    (start, end): (usize, usize),
    out: &mut [F],
    decay: &mut [F],
) {
    let (heads, dk, dv) = (x.heads, x.d_k, x.d_v);
    for t in start..end {
        let iq = at(t, head, heads, dk);
        let qt = &x.q[iq..iq + dk];
        let io = at(t, head, heads, dv);
        decay.fill(F::one());
        for s in (start..=t).rev() {
            let is = at(s, head, heads, dk);
            let ks = &x.k[is..is + dk];
            let mut w = F::zero();
            for i in 0..dk {
                w += qt[i] * ks[i] * decay[i];
            }
            let ivs = at(s, head, heads, dv);
            for j in 0..dv {
                out[io + j] += w * x.v[ivs + j];
            }
            let a = &x.alpha[is..is + dk];
            for i in 0..dk {
                decay[i] *= a[i];
            }
        }
    }
}

/// O(T^2) reference form.
pub fn gla_forward_quadratic<F: Scalar>(x: &AttnInputs<F>) -> Result<Vec<F>> {
    x.validate()?;
    let mut out = vec![F::zero(); x.out_len()];
    let mut decay = vec![F::one(); x.d_k];
    for h in 0..x.heads {
        quadratic_window(x, h, (0, x.seq_len), &mut out, &mut decay);
    }
    Ok(out)
}

/// Chunked form: quadratic inside each chunk, with history carried across
/// chunk boundaries by a state updated once per chunk.
pub fn gla_forward_chunked<F: Scalar>(x: &AttnInputs<F>, plan: ChunkPlan) -> Result<Vec<F>> {
    x.validate()?;
    if plan.chunk == 0 || plan.chunk > x.seq_len {
        return Err(Error::contract(format!(
            "chunk size {} outside 1..={}",
            plan.chunk, x.seq_len
        )));
    }
    let (heads, dk, dv) = (x.heads, x.d_k, x.d_v);
    let mut out = vec![F::zero(); x.out_len()];
    let mut decay = vec![F::one(); dk];
    let mut gamma = vec![F::one(); dk];
    let mut state = vec![F::zero(); dk * dv];
    let bounds = plan.boundaries(x.seq_len);
    for h in 0..heads {
        state.fill(F::zero());
        for (ci, &(start, end)) in bounds.iter().enumerate() {
            quadratic_window(x, h, (start, end), &mut out, &mut decay);
            // Inter-chunk history; the state is identically zero before the
            // first chunk, so that chunk is the pure quadratic window.
            gamma.fill(F::one());
            for t in start..end {
                let ik = at(t, h, heads, dk);
                for i in 0..dk {
                    gamma[i] *= x.alpha[ik + i];
                }
                if ci > 0 {
                    let io = at(t, h, heads, dv);
                    for i in 0..dk {
                        let qg = x.q[ik + i] * gamma[i];
                        let row = &state[i * dv..(i + 1) * dv];
                        for j in 0..dv {
                            out[io + j] += qg * row[j];
                        }
                    }
                }
            }
            if ci + 1 == bounds.len() {
                break;
            }
            // S <- Diag(gamma_end) S + sum_s Diag(prod_{s<u<end} alpha_u) k_s v_s^T
            for i in 0..dk {
                let g = gamma[i];
                for sij in &mut state[i * dv..(i + 1) * dv] {
                    *sij *= g;
                }
            }
            decay.fill(F::one());
            for s in (start..end).rev() {
                let ik = at(s, h, heads, dk);
                let iv = at(s, h, heads, dv);
                for i in 0..dk {
                    let kd = x.k[ik + i] * decay[i];
                    let row = &mut state[i * dv..(i + 1) * dv];
                    for j in 0..dv {
                        row[j] += kd * x.v[iv + j];
                    }
                    decay[i] *= x.alpha[ik + i];
                }
            }
        }
    }
    Ok(out)
}

/// Causal scaled dot-product softmax attention, `[T, H, d]` layout.
#[allow(clippy::too_many_arguments)]
pub fn softmax_attention_causal<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    seq_len: usize,
    heads: usize,
    d_k: usize,
    d_v: usize,
) -> Result<Vec<F>> {
    let nk = seq_len * heads * d_k;
    if q.len() != nk || k.len() != nk || v.len() != seq_len * heads * d_v {
        return Err(Error::contract(format!(
            "softmax attention inputs do not match T={seq_len} H={heads} d_k={d_k} d_v={d_v}"
        )));
    }
    let scale = F::c(1.0 / (d_k as f64).sqrt());
    let mut out = vec![F::zero(); seq_len * heads * d_v];
    let mut scores = vec![F::zero(); seq_len];
    for h in 0..heads {
        for t in 0..seq_len {
            let iq = at(t, h, heads, d_k);
            let qt = &q[iq..iq + d_k];
            let mut mx = F::neg_infinity();
            for (s, sc) in scores.iter_mut().enumerate().take(t + 1) {
                let ik = at(s, h, heads, d_k);
                let dot: F = qt.iter().zip(&k[ik..ik + d_k]).map(|(&a, &b)| a * b).sum();
                *sc = dot * scale;
                mx = mx.max(*sc);
            }
            let mut z = F::zero();
            for sc in scores.iter_mut().take(t + 1) {
                *sc = (*sc - mx).exp();
                z += *sc;
            }
            let io = at(t, h, heads, d_v);
            for (s, &w) in scores.iter().enumerate().take(t + 1) {
                let iv = at(s, h, heads, d_v);
                let w = w / z;
                for j in 0..d_v {
                    out[io + j] += w * v[iv + j];
                }
            }
        }
    }
    Ok(out)
}
