//! Reverse-mode differentiation over a fixed primitive set.
//!
//! Every primitive evaluates eagerly and appends a node to the tape. Nodes are
//! created in topological order, so backward is a single sweep in exact
//! reverse recording order.

use std::collections::HashMap;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The primitive operations the tape knows how to differentiate.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[m, k] @ [k, n]`.
    Matmul,
    /// Elementwise; the right operand may be a trailing-suffix broadcast.
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sigmoid,
    Tanh,
    /// Tanh approximation.
    Gelu,
    Exp,
    Log,
    SoftmaxLastAxis,
    /// Inputs `(x, gain, bias)`, normalizing over the last axis.
    LayerNorm,
    /// Running product along axis 0.
    CumprodTimeAxis,
    Reshape(Vec<usize>),
    /// Two-dimensional transpose.
    Transpose,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    GatherRows(Vec<usize>),
    ReduceSum,
    ReduceMean,
    /// Mean of squared differences, a scalar.
    Mse,
    Clamp {
        lo: f64,
        hi: f64,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Gelu => "gelu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::SoftmaxLastAxis => "softmax_last_axis",
            Primitive::LayerNorm => "layer_norm",
            Primitive::CumprodTimeAxis => "cumprod_time_axis",
            Primitive::Reshape(_) => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::ReduceSum => "reduce_sum",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::Mse => "mse",
            Primitive::Clamp { .. } => "clamp",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Matmul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Mse => Some(2),
            Primitive::LayerNorm => Some(3),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Operation implemented outside the primitive set, with its own
/// vector-Jacobian product.
pub trait CustomOp<F: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the output gradient; `None` for
    /// inputs the op does not differentiate.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>>;
}

enum Saved<F> {
    None,
    LayerNorm { xhat: Vec<F>, rstd: Vec<F> },
}

enum Op<F: Scalar> {
    Leaf,
    Prim {
        prim: Primitive,
        inputs: Vec<usize>,
        saved: Saved<F>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn check_finite<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Outer repeat count when `b` broadcasts over the leading axes of `a`.
fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(a[..a.len() - b.len()].iter().product())
    } else {
        Err(shape_err(op, a, b))
    }
}

fn last_dim(op: &'static str, s: &[usize]) -> Result<usize> {
    s.last()
        .copied()
        .filter(|&d| d > 0)
        .ok_or_else(|| shape_err(op, s, &[]))
}

/// Split a shape around `axis` into (outer, axis length, inner).
fn axis_split(op: &'static str, s: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= s.len() {
        return Err(shape_err(op, s, &[axis]));
    }
    Ok((
        s[..axis].iter().product(),
        s[axis],
        s[axis + 1..].iter().product(),
    ))
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let u = F::c(GELU_C) * (x + F::c(GELU_A) * x * x * x);
    F::c(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let u = F::c(GELU_C) * (x + F::c(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = F::c(GELU_C) * (F::one() + F::c(3.0 * GELU_A) * x * x);
    F::c(0.5) * (F::one() + th) + F::c(0.5) * x * (F::one() - th * th) * du
}

/// `[m, k] @ [k, n]` with optional transposes expressed through strides.
pub fn matmul_raw<F: Scalar>(
    a: &[F],
    (m, k): (usize, usize),
    a_t: bool,
    b: &[F],
    n: usize,
    b_t: bool,
) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    if m == 0 || n == 0 {
        return out;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: `a` holds m*k, `b` holds k*n and `out` m*n elements, and the
    // strides above address exactly those ranges.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            F::zero(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

fn forward<F: Scalar>(prim: &Primitive, x: &[&Tensor<F>]) -> Result<(Tensor<F>, Saved<F>)> {
    let op = prim.name();
    let unary = |f: &dyn Fn(F) -> F| (x[0].map(f), Saved::None);
    let out = match prim {
        Primitive::Matmul => {
            let (a, b) = (x[0].shape(), x[1].shape());
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(shape_err(op, a, b));
            }
            let data = matmul_raw(x[0].data(), (a[0], a[1]), false, x[1].data(), b[1], false);
            (Tensor::new(vec![a[0], b[1]], data)?, Saved::None)
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let outer = suffix_broadcast(op, x[0].shape(), x[1].shape())?;
            let inner = x[1].len();
            let f: fn(F, F) -> F = match prim {
                Primitive::Add => |a, b| a + b,
                Primitive::Sub => |a, b| a - b,
                _ => |a, b| a * b,
            };
            let bd = x[1].data();
            let mut data = Vec::with_capacity(outer * inner);
            for chunk in x[0].data().chunks(inner.max(1)) {
                data.extend(chunk.iter().zip(bd).map(|(&a, &b)| f(a, b)));
            }
            if inner == 0 {
                data.clear();
            }
            (Tensor::new(x[0].shape().to_vec(), data)?, Saved::None)
        }
        Primitive::Scale(c) => {
            let c = F::c(*c);
            unary(&|v| v * c)
        }
        Primitive::Sigmoid => unary(&sigmoid),
        Primitive::Tanh => unary(&|v: F| v.tanh()),
        Primitive::Gelu => unary(&gelu),
        Primitive::Exp => unary(&|v: F| v.exp()),
        Primitive::Log => unary(&|v: F| v.ln()),
        Primitive::Clamp { lo, hi } => {
            let (lo, hi) = (F::c(*lo), F::c(*hi));
            unary(&|v: F| v.max(lo).min(hi))
        }
        Primitive::SoftmaxLastAxis => {
            let d = last_dim(op, x[0].shape())?;
            let mut data = x[0].data().to_vec();
            for row in data.chunks_mut(d) {
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            (Tensor::new(x[0].shape().to_vec(), data)?, Saved::None)
        }
        Primitive::LayerNorm => {
            let d = last_dim(op, x[0].shape())?;
            if x[1].shape() != [d] || x[2].shape() != [d] {
                return Err(shape_err(op, x[0].shape(), x[1].shape()));
            }
            let (gain, bias) = (x[1].data(), x[2].data());
            let rows = x[0].len() / d;
            let mut xhat = Vec::with_capacity(x[0].len());
            let mut rstd = Vec::with_capacity(rows);
            let mut data = Vec::with_capacity(x[0].len());
            let inv_d = F::c(1.0 / d as f64);
            for row in x[0].data().chunks(d) {
                let mean = row.iter().copied().sum::<F>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
                let r = F::one() / (var + F::c(LAYER_NORM_EPS)).sqrt();
                rstd.push(r);
                for (i, &v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    data.push(h * gain[i] + bias[i]);
                }
            }
            (
                Tensor::new(x[0].shape().to_vec(), data)?,
                Saved::LayerNorm { xhat, rstd },
            )
        }
        Primitive::CumprodTimeAxis => {
            let s = x[0].shape();
            if s.is_empty() {
                return Err(shape_err(op, s, &[]));
            }
            let inner: usize = s[1..].iter().product();
            let mut data = x[0].data().to_vec();
            for t in 1..s[0] {
                for i in 0..inner {
                    data[t * inner + i] = data[(t - 1) * inner + i] * data[t * inner + i];
                }
            }
            (Tensor::new(s.to_vec(), data)?, Saved::None)
        }
        Primitive::Reshape(shape) => (x[0].clone().reshape(shape.clone())?, Saved::None),
        Primitive::Transpose => {
            let s = x[0].shape();
            if s.len() != 2 {
                return Err(shape_err(op, s, &[]));
            }
            let (r, c) = (s[0], s[1]);
            let src = x[0].data();
            let mut data = vec![F::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = src[i * c + j];
                }
            }
            (Tensor::new(vec![c, r], data)?, Saved::None)
        }
        Primitive::Concat { axis } => {
            let first = x[0].shape();
            let (outer, _, inner) = axis_split(op, first, *axis)?;
            let mut total = 0;
            for t in x {
                let s = t.shape();
                if s.len() != first.len()
                    || s[..*axis] != first[..*axis]
                    || s[axis + 1..] != first[axis + 1..]
                {
                    return Err(shape_err(op, first, s));
                }
                total += s[*axis];
            }
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in x {
                    let w = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            (Tensor::new(shape, data)?, Saved::None)
        }
        Primitive::Slice { axis, start, len } => {
            let s = x[0].shape();
            let (outer, n, inner) = axis_split(op, s, *axis)?;
            if start + len > n {
                return Err(shape_err(op, s, &[*start, *len]));
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data.extend_from_slice(&x[0].data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = *len;
            (Tensor::new(shape, data)?, Saved::None)
        }
        Primitive::GatherRows(idx) => {
            let s = x[0].shape();
            if s.is_empty() {
                return Err(shape_err(op, s, &[]));
            }
            let inner: usize = s[1..].iter().product();
            let mut data = Vec::with_capacity(idx.len() * inner);
            for &r in idx {
                if r >= s[0] {
                    return Err(shape_err(op, s, &[r]));
                }
                data.extend_from_slice(&x[0].data()[r * inner..(r + 1) * inner]);
            }
            let mut shape = s.to_vec();
            shape[0] = idx.len();
            (Tensor::new(shape, data)?, Saved::None)
        }
        Primitive::ReduceSum => (Tensor::scalar(x[0].sum()), Saved::None),
        Primitive::ReduceMean => {
            if x[0].is_empty() {
                return Err(shape_err(op, x[0].shape(), &[]));
            }
            (Tensor::scalar(x[0].mean()), Saved::None)
        }
        Primitive::Mse => {
            if x[0].shape() != x[1].shape() || x[0].is_empty() {
                return Err(shape_err(op, x[0].shape(), x[1].shape()));
            }
            let s: F = x[0]
                .data()
                .iter()
                .zip(x[1].data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            (Tensor::scalar(s / F::c(x[0].len() as f64)), Saved::None)
        }
    };
    Ok(out)
}

fn reduce_broadcast<F: Scalar>(g: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    let inner: usize = shape.iter().product();
    let mut acc = vec![F::zero(); inner];
    if inner > 0 {
        for chunk in g.data().chunks(inner) {
            for (a, &v) in acc.iter_mut().zip(chunk) {
                *a += v;
            }
        }
    }
    Tensor::new(shape.to_vec(), acc)
}

fn backward_prim<F: Scalar>(
    prim: &Primitive,
    x: &[&Tensor<F>],
    y: &Tensor<F>,
    saved: &Saved<F>,
    g: &Tensor<F>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let ew = |f: &dyn Fn(usize) -> F| -> Result<Tensor<F>> {
        Tensor::new(x[0].shape().to_vec(), (0..x[0].len()).map(f).collect())
    };
    let gd = g.data();
    let out = match prim {
        Primitive::Matmul => {
            let (m, k, n) = (x[0].shape()[0], x[0].shape()[1], x[1].shape()[1]);
            let da = need[0]
                .then(|| {
                    Tensor::new(
                        vec![m, k],
                        matmul_raw(gd, (m, n), false, x[1].data(), k, true),
                    )
                })
                .transpose()?;
            let db = need[1]
                .then(|| {
                    Tensor::new(
                        vec![k, n],
                        matmul_raw(x[0].data(), (k, m), true, gd, n, false),
                    )
                })
                .transpose()?;
            vec![da, db]
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let inner = x[1].len().max(1);
            let da = if need[0] {
                Some(match prim {
                    Primitive::Mul => {
                        let b = x[1].data();
                        ew(&|i| gd[i] * b[i % inner])?
                    }
                    _ => g.clone(),
                })
            } else {
                None
            };
            let db = if need[1] {
                let full = match prim {
                    Primitive::Add => g.clone(),
                    Primitive::Sub => g.map(|v| -v),
                    _ => {
                        let a = x[0].data();
                        ew(&|i| gd[i] * a[i])?
                    }
                };
                Some(reduce_broadcast(&full, x[1].shape())?)
            } else {
                None
            };
            vec![da, db]
        }
        Primitive::Scale(c) => {
            let c = F::c(*c);
            vec![Some(g.map(|v| v * c))]
        }
        Primitive::Sigmoid => {
            let yd = y.data();
            vec![Some(ew(&|i| gd[i] * yd[i] * (F::one() - yd[i]))?)]
        }
        Primitive::Tanh => {
            let yd = y.data();
            vec![Some(ew(&|i| gd[i] * (F::one() - yd[i] * yd[i]))?)]
        }
        Primitive::Gelu => {
            let xd = x[0].data();
            vec![Some(ew(&|i| gd[i] * gelu_grad(xd[i]))?)]
        }
        Primitive::Exp => {
            let yd = y.data();
            vec![Some(ew(&|i| gd[i] * yd[i])?)]
        }
        Primitive::Log => {
            let xd = x[0].data();
            vec![Some(ew(&|i| gd[i] / xd[i])?)]
        }
        Primitive::Clamp { lo, hi } => {
            let (lo, hi) = (F::c(*lo), F::c(*hi));
            let xd = x[0].data();
            vec![Some(ew(&|i| {
                if xd[i] >= lo && xd[i] <= hi {
                    gd[i]
                } else {
                    F::zero()
                }
            })?)]
        }
        Primitive::SoftmaxLastAxis => {
            let d = *y.shape().last().unwrap();
            let mut dx = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks(d).zip(gd.chunks(d)) {
                let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
            }
            vec![Some(Tensor::new(y.shape().to_vec(), dx)?)]
        }
        Primitive::LayerNorm => {
            let Saved::LayerNorm { xhat, rstd } = saved else {
                unreachable!("layer_norm always saves statistics")
            };
            let d = *y.shape().last().unwrap();
            let gain = x[1].data();
            let mut dx = Vec::with_capacity(y.len());
            let mut dgain = vec![F::zero(); d];
            let mut dbias = vec![F::zero(); d];
            let inv_d = F::c(1.0 / d as f64);
            for (r, (hr, gr)) in xhat.chunks(d).zip(gd.chunks(d)).enumerate() {
                let mut s1 = F::zero();
                let mut s2 = F::zero();
                for i in 0..d {
                    let dh = gr[i] * gain[i];
                    s1 += dh;
                    s2 += dh * hr[i];
                    dgain[i] += gr[i] * hr[i];
                    dbias[i] += gr[i];
                }
                for i in 0..d {
                    let dh = gr[i] * gain[i];
                    dx.push(rstd[r] * (dh - s1 * inv_d - hr[i] * s2 * inv_d));
                }
            }
            vec![
                Some(Tensor::new(y.shape().to_vec(), dx)?),
                Some(Tensor::new(vec![d], dgain)?),
                Some(Tensor::new(vec![d], dbias)?),
            ]
        }
        Primitive::CumprodTimeAxis => {
            let s = y.shape();
            let inner: usize = s[1..].iter().product();
            let xd = x[0].data();
            let yd = y.data();
            let mut dx = vec![F::zero(); y.len()];
            for i in 0..inner {
                let mut acc = F::zero();
                for t in (0..s[0]).rev() {
                    acc = if t + 1 < s[0] {
                        gd[t * inner + i] + xd[(t + 1) * inner + i] * acc
                    } else {
                        gd[t * inner + i]
                    };
                    let prev = if t == 0 {
                        F::one()
                    } else {
                        yd[(t - 1) * inner + i]
                    };
                    dx[t * inner + i] = prev * acc;
                }
            }
            vec![Some(Tensor::new(s.to_vec(), dx)?)]
        }
        Primitive::Reshape(_) => vec![Some(g.clone().reshape(x[0].shape().to_vec())?)],
        Primitive::Transpose => {
            let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
            let mut dx = vec![F::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = gd[j * r + i];
                }
            }
            vec![Some(Tensor::new(vec![r, c], dx)?)]
        }
        Primitive::Concat { axis } => {
            let (outer, total, inner) = axis_split("concat", y.shape(), *axis)?;
            let mut grads = Vec::with_capacity(x.len());
            let mut off = 0;
            for (t, &nd) in x.iter().zip(need) {
                let n = t.shape()[*axis];
                if nd {
                    let mut d = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + off) * inner;
                        d.extend_from_slice(&gd[base..base + n * inner]);
                    }
                    grads.push(Some(Tensor::new(t.shape().to_vec(), d)?));
                } else {
                    grads.push(None);
                }
                off += n;
            }
            grads
        }
        Primitive::Slice { axis, start, len } => {
            let (outer, n, inner) = axis_split("slice", x[0].shape(), *axis)?;
            let mut dx = vec![F::zero(); x[0].len()];
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            vec![Some(Tensor::new(x[0].shape().to_vec(), dx)?)]
        }
        Primitive::GatherRows(idx) => {
            let inner: usize = x[0].shape()[1..].iter().product();
            let mut dx = vec![F::zero(); x[0].len()];
            for (j, &r) in idx.iter().enumerate() {
                for i in 0..inner {
                    dx[r * inner + i] += gd[j * inner + i];
                }
            }
            vec![Some(Tensor::new(x[0].shape().to_vec(), dx)?)]
        }
        Primitive::ReduceSum => {
            let v = gd[0];
            vec![Some(Tensor::full(x[0].shape().to_vec(), v))]
        }
        Primitive::ReduceMean => {
            let v = gd[0] / F::c(x[0].len() as f64);
            vec![Some(Tensor::full(x[0].shape().to_vec(), v))]
        }
        Primitive::Mse => {
            let c = gd[0] * F::c(2.0 / x[0].len() as f64);
            let (a, b) = (x[0].data(), x[1].data());
            let da = need[0].then(|| ew(&|i| c * (a[i] - b[i]))).transpose()?;
            let db = need[1].then(|| ew(&|i| c * (b[i] - a[i]))).transpose()?;
            vec![da, db]
        }
    };
    Ok(out)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register every tensor of `store` as a named leaf.
    ///
    /// Frozen stores (`trainable == false`) become constants and never
    /// receive gradient entries.
    pub fn bind(&mut self, store: &ParamStore<F>, trainable: bool) -> Result<()> {
        for (name, t) in store.iter() {
            if self.params.contains_key(name) {
                return Err(Error::contract(format!("parameter `{name}` bound twice")));
            }
            let v = self.leaf(t.clone(), trainable);
            self.params.insert(name.to_string(), v);
            self.param_order.push(name.to_string());
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = prim.arity() {
            if inputs.len() != n {
                return Err(Error::contract(format!(
                    "{} expects {n} inputs, got {}",
                    prim.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::contract(format!("{} needs inputs", prim.name())));
        }
        let vals: Vec<&Tensor<F>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (out, saved) = forward(&prim, &vals)?;
        check_finite(prim.name(), &out)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg {
            Op::Prim {
                prim,
                inputs: inputs.iter().map(|v| v.0).collect(),
                saved,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(out, op, rg))
    }

    /// Record a custom op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<F>,
        op: Box<dyn CustomOp<F>>,
    ) -> Result<Var> {
        check_finite(op.name(), &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg {
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                op,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(value, op, rg))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let n_el = self.nodes[loss.0].value.len();
        if n_el != 1 {
            return Err(Error::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(
            self.nodes[loss.0].value.shape().to_vec(),
            F::one(),
        ));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let (inputs, input_grads) = match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Prim {
                    prim,
                    inputs,
                    saved,
                } => {
                    let vals: Vec<&Tensor<F>> =
                        inputs.iter().map(|&i| &self.nodes[i].value).collect();
                    let need: Vec<bool> = inputs
                        .iter()
                        .map(|&i| self.nodes[i].requires_grad)
                        .collect();
                    (
                        inputs,
                        backward_prim(prim, &vals, &node.value, saved, &g, &need)?,
                    )
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor<F>> =
                        inputs.iter().map(|&i| &self.nodes[i].value).collect();
                    (inputs, op.backward(&vals, &node.value, &g)?)
                }
            };
            for (&i, gi) in inputs.iter().zip(input_grads) {
                if !self.nodes[i].requires_grad {
                    continue;
                }
                let Some(gi) = gi else { continue };
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let mut leaf_grads = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[id].op) {
                if self.nodes[id].requires_grad {
                    leaf_grads.insert(id, g);
                }
            }
        }
        Ok(Gradients {
            by_node: leaf_grads,
            params: self.params,
        })
    }
}

macro_rules! unary_ops {
    ($($fn:ident => $prim:expr),* $(,)?) => {
        impl<F: Scalar> Tape<F> {
            $(pub fn $fn(&mut self, a: Var) -> Result<Var> {
                self.apply($prim, &[a])
            })*
        }
    };
}

unary_ops! {
    sigmoid => Primitive::Sigmoid,
    tanh => Primitive::Tanh,
    gelu => Primitive::Gelu,
    exp => Primitive::Exp,
    log => Primitive::Log,
    softmax => Primitive::SoftmaxLastAxis,
    cumprod => Primitive::CumprodTimeAxis,
    transpose => Primitive::Transpose,
    sum => Primitive::ReduceSum,
    mean => Primitive::ReduceMean,
}

impl<F: Scalar> Tape<F> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.apply(Primitive::LayerNorm, &[x, gain, bias])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.apply(Primitive::GatherRows(idx.to_vec()), &[a])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mse, &[a, b])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[a])
    }

    /// Multiply by a constant tensor (broadcast as in [`Primitive::Mul`]).
    pub fn mul_const(&mut self, a: Var, c: Tensor<F>) -> Result<Var> {
        let c = self.constant(c);
        self.mul(a, c)
    }

    pub fn add_const(&mut self, a: Var, c: Tensor<F>) -> Result<Var> {
        let c = self.constant(c);
        self.add(a, c)
    }
}

/// Gradients of a scalar loss with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    by_node: HashMap<usize, Tensor<F>>,
    params: HashMap<String, Var>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.by_node.get(&v.0)
    }

    /// Gradient of a bound trainable parameter, if one reached it.
    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name).and_then(|v| self.by_node.get(&v.0))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }

    /// Global L2 norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|v| self.by_node.get(&v.0))
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient, e.g. for norm clipping.
    pub fn scale(&mut self, c: f64) {
        let c = F::c(c);
        for g in self.by_node.values_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[0.0]), true);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![3], 3.0));
        let g = tape.constant(Tensor::ones(vec![3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cumprod_running_product() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let y = tape.cumprod(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.25]);
    }

    #[test]
    fn mse_against_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[2.0]), true);
        let z = tape.constant(t(&[1], &[0.0]));
        let l = tape.mse(x, z).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_a_fault() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new(vec![1], vec![-1.0]).unwrap());
        assert!(matches!(tape.log(a), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn non_scalar_and_detached_losses_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2]));
        let l = tape.sum(a).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::DetachedLoss)));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let b = tape.leaf(t(&[3], &[1., 1., 1.]), true);
        let y = tape.add(a, b).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut frozen = ParamStore::<f64>::new();
        frozen.insert("w", t(&[1], &[3.0])).unwrap();
        let mut live = ParamStore::<f64>::new();
        live.insert("v", t(&[1], &[2.0])).unwrap();
        let mut tape = Tape::new();
        tape.bind(&frozen, false).unwrap();
        tape.bind(&live, true).unwrap();
        let (w, v) = (tape.param("w").unwrap(), tape.param("v").unwrap());
        let y = tape.mul(w, v).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.param("w").is_none());
        assert_eq!(g.param("v").unwrap().data(), &[3.0]);
    }

    #[test]
    fn matmul_row_batch_invariant() {
        // Each output row must not depend on how many rows are batched,
        // so batched sampling reproduces single-sample results bit for bit.
        let mut rng = crate::numerics::Rng::new(3);
        for &(m, k, n) in &[(37usize, 64usize, 64usize), (256, 128, 120), (5, 16, 256)] {
            let a: Tensor<f32> = rng.gaussian_tensor(&[m, k]);
            let b: Tensor<f32> = rng.gaussian_tensor(&[k, n]);
            let full = matmul_raw(a.data(), (m, k), false, b.data(), n, false);
            for r in [0, m / 2, m - 1] {
                let row = matmul_raw(
                    &a.data()[r * k..(r + 1) * k],
                    (1, k),
                    false,
                    b.data(),
                    n,
                    false,
                );
                assert_eq!(
                    &full[r * n..(r + 1) * n],
                    &row[..],
                    "row {r} of {m}x{k}x{n}"
                );
            }
        }
    }
}
