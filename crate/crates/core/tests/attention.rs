use motionlcm::attention::{
    gla_forward_chunked, gla_forward_quadratic, gla_forward_recurrent, gla_recurrent_step,
    softmax_attention_causal, AttnInputs, BlockConfig, ChunkPlan, DecayState, GlaBlock,
};
use motionlcm::numerics::{grad_check, ParamStore, Rng, StoreObjective, Tape, Tensor};
use proptest::prelude::*;

/// Direct evaluation of the state recurrence with nested vectors.
fn oracle(x: &AttnInputs<f64>) -> Vec<f64> {
    let (t_len, h_n, dk, dv) = (x.seq_len, x.heads, x.d_k, x.d_v);
    let mut out = vec![0.0; t_len * h_n * dv];
    for h in 0..h_n {
        let mut s = vec![vec![0.0; dv]; dk];
        for t in 0..t_len {
            let kb = (t * h_n + h) * dk;
            let vb = (t * h_n + h) * dv;
            for i in 0..dk {
                for j in 0..dv {
                    s[i][j] = x.alpha[kb + i] * s[i][j] + x.k[kb + i] * x.v[vb + j];
                }
            }
            for j in 0..dv {
                out[vb + j] = (0..dk).map(|i| x.q[kb + i] * s[i][j]).sum();
            }
        }
    }
    out
}

fn max_diff<F: Into<f64> + Copy>(a: &[F], b: &[F]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.into() - y.into()).abs())
        .fold(0.0, f64::max)
}

fn chunk_sizes(t: usize) -> Vec<usize> {
    let mut c: Vec<usize> = [1, 4, 16, 64].into_iter().filter(|&c| c <= t).collect();
    if !c.contains(&t) {
        c.push(t);
    }
    c
}

#[test]
fn three_step_golden() {
    // d_k = d_v = 2, one head.
    let x = AttnInputs::<f64> {
        seq_len: 3,
        heads: 1,
        d_k: 2,
        d_v: 2,
        q: vec![1.0, 0.5, -1.0, 2.0, 0.25, 0.25],
        k: vec![0.5, -1.0, 1.0, 1.0, 2.0, 0.0],
        v: vec![1.0, 2.0, -3.0, 0.5, 1.0, 1.0],
        alpha: vec![0.5, 0.9, 0.8, 0.1, 0.3, 0.6],
    };
    let golden = oracle(&x);
    let mut state = DecayState::zeros(1, 2, 2);
    let mut stepped = Vec::new();
    for t in 0..3 {
        let r = 2 * t..2 * t + 2;
        stepped.extend(
            gla_recurrent_step(
                &mut state,
                &x.q[r.clone()],
                &x.k[r.clone()],
                &x.v[r.clone()],
                &x.alpha[r],
            )
            .unwrap(),
        );
    }
    assert_eq!(state.t, 3);
    assert!(max_diff(&stepped, &golden) < 1e-14);
    // Hand-worked first output: S1 = k1 v1^T, o1 = q1^T S1.
    assert!((stepped[0] - (0.5 - 0.5)).abs() < 1e-15);
    assert!((stepped[1] - (1.0 - 1.0)).abs() < 1e-15);
    assert!(max_diff(&gla_forward_recurrent(&x).unwrap(), &golden) < 1e-14);
}

#[test]
fn recurrent_matches_oracle_t64() {
    let x = AttnInputs::<f64>::random(&mut Rng::new(64), 64, 2, 8, 8, (0.05, 0.999));
    assert!(max_diff(&gla_forward_recurrent(&x).unwrap(), &oracle(&x)) < 1e-12);
}

#[test]
fn quadratic_t32_matches_recurrent() {
    let x = AttnInputs::<f64>::random(&mut Rng::new(32), 32, 2, 8, 8, (0.05, 0.999));
    let r = gla_forward_recurrent(&x).unwrap();
    assert!(max_diff(&gla_forward_quadratic(&x).unwrap(), &r) < 1e-10);
}

#[test]
fn single_chunk_is_the_quadratic_path() {
    let mut rng = Rng::new(5);
    for t in [1, 7, 33] {
        let x = AttnInputs::<f32>::random(&mut rng, t, 2, 4, 3, (0.05, 0.999));
        let q = gla_forward_quadratic(&x).unwrap();
        let c = gla_forward_chunked(&x, ChunkPlan::new(t)).unwrap();
        assert_eq!(q, c);
    }
}

#[test]
fn long_sequence_chunked_f32() {
    let mut rng = Rng::new(256);
    let x = AttnInputs::<f32>::random(&mut rng, 256, 2, 32, 32, (0.05, 0.999));
    let r = gla_forward_recurrent(&x).unwrap();
    for c in [4, 16, 64] {
        let o = gla_forward_chunked(&x, ChunkPlan::new(c)).unwrap();
        let d = max_diff(&o, &r);
        assert!(d < 1e-4, "C={c}: {d}");
    }
    let x64 = x.cast::<f64>();
    let r64 = gla_forward_recurrent(&x64).unwrap();
    for c in [4, 16, 64] {
        let o = gla_forward_chunked(&x64, ChunkPlan::new(c)).unwrap();
        assert!(max_diff(&o, &r64) < 1e-10);
    }
}

#[test]
fn softmax_matches_dense_oracle() {
    let (t_len, h_n, dk, dv) = (16, 2, 4, 3);
    let x = AttnInputs::<f64>::random(&mut Rng::new(16), t_len, h_n, dk, dv, (0.5, 0.6));
    let o = softmax_attention_causal(&x.q, &x.k, &x.v, t_len, h_n, dk, dv).unwrap();
    let scale = 1.0 / (dk as f64).sqrt();
    for h in 0..h_n {
        for t in 0..t_len {
            let scores: Vec<f64> = (0..=t)
                .map(|s| {
                    (0..dk)
                        .map(|i| x.q[(t * h_n + h) * dk + i] * x.k[(s * h_n + h) * dk + i])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..dv {
                let want: f64 = (0..=t)
                    .map(|s| scores[s].exp() / z * x.v[(s * h_n + h) * dv + j])
                    .sum();
                assert!((o[(t * h_n + h) * dv + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn chunked_rejects_bad_plans() {
    let x = AttnInputs::<f64>::random(&mut Rng::new(1), 8, 1, 2, 2, (0.5, 0.9));
    assert!(gla_forward_chunked(&x, ChunkPlan::new(0)).is_err());
    assert!(gla_forward_chunked(&x, ChunkPlan::new(9)).is_err());
}

#[test]
fn impulse_influence_decays_with_distance() {
    // Only v at time s is nonzero, q and k are positive: the influence on
    // o_t is the gate product over (s, t], so it shrinks as t - s grows and
    // shrinks further when gates move toward 0.
    let (t_len, dk, dv, s) = (24, 3, 2, 5);
    let mut rng = Rng::new(77);
    let base = AttnInputs::<f64>::random(&mut rng, t_len, 1, dk, dv, (0.3, 0.95));
    let mut probe = base.clone();
    probe.q.iter_mut().for_each(|v| *v = v.abs() + 0.1);
    probe.k.iter_mut().for_each(|v| *v = v.abs() + 0.1);
    probe
        .v
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = if i / dv == s { 1.0 } else { 0.0 });
    let influence = |x: &AttnInputs<f64>| -> Vec<f64> {
        let o = gla_forward_recurrent(x).unwrap();
        (s..t_len)
            .map(|t| (0..dv).map(|j| o[t * dv + j].powi(2)).sum::<f64>().sqrt())
            .collect()
    };
    // Constant q per step keeps the comparison about the gates alone.
    for t in 0..t_len {
        for i in 0..dk {
            probe.q[t * dk + i] = 1.0;
        }
    }
    let full = influence(&probe);
    assert!(full.windows(2).all(|w| w[1] < w[0]));
    let mut lam = 1.0;
    let mut prev = full;
    for _ in 0..3 {
        lam *= 0.7;
        let mut scaled = probe.clone();
        scaled.alpha.iter_mut().for_each(|a| *a *= lam);
        let inf = influence(&scaled);
        assert!(inf.windows(2).all(|w| w[1] < w[0]));
        assert!((inf[0] - prev[0]).abs() < 1e-12);
        assert!(inf[1..].iter().zip(&prev[1..]).all(|(a, b)| a < b));
        prev = inf;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn three_way_equivalence(
        t in 1usize..=96, h in 1usize..=2, dk in 1usize..=32, dv in 1usize..=32, seed in any::<u64>(),
    ) {
        let x = AttnInputs::<f64>::random(&mut Rng::new(seed), t, h, dk, dv, (0.05, 0.999));
        let r = gla_forward_recurrent(&x).unwrap();
        let q = gla_forward_quadratic(&x).unwrap();
        prop_assert!(max_diff(&q, &r) < 1e-10);
        let x32 = x.cast::<f32>();
        let r32 = gla_forward_recurrent(&x32).unwrap();
        prop_assert!(max_diff(&gla_forward_quadratic(&x32).unwrap(), &r32) < 1e-4);
        for c in chunk_sizes(t) {
            let e = max_diff(&gla_forward_chunked(&x, ChunkPlan::new(c)).unwrap(), &r);
            prop_assert!(e < 1e-10, "f64 C={c}: {e}");
            let e = max_diff(&gla_forward_chunked(&x32, ChunkPlan::new(c)).unwrap(), &r32);
            prop_assert!(e < 1e-4, "f32 C={c}: {e}");
        }
    }

    #[test]
    fn causality(t in 2usize..=40, t0 in 0usize..40, seed in any::<u64>()) {
        let t0 = t0 % (t - 1);
        let (h, dk, dv) = (2, 4, 3);
        let x = AttnInputs::<f32>::random(&mut Rng::new(seed), t, h, dk, dv, (0.05, 0.999));
        let mut y = x.clone();
        let mut rng = Rng::new(seed ^ 1);
        for s in t0 + 1..t {
            for i in 0..h * dk {
                y.q[s * h * dk + i] += rng.gaussian() as f32;
                y.k[s * h * dk + i] -= 0.5;
                y.alpha[s * h * dk + i] = rng.uniform_in(0.05, 0.999) as f32;
            }
            for j in 0..h * dv {
                y.v[s * h * dv + j] *= -3.0;
            }
        }
        let keep = (t0 + 1) * h * dv;
        let forms: Vec<Box<dyn Fn(&AttnInputs<f32>) -> Vec<f32>>> = vec![
            Box::new(|x| gla_forward_recurrent(x).unwrap()),
            Box::new(|x| gla_forward_quadratic(x).unwrap()),
            Box::new(|x| gla_forward_chunked(x, ChunkPlan::new(4.min(x.seq_len))).unwrap()),
            Box::new(|x| gla_forward_chunked(x, ChunkPlan::new(x.seq_len)).unwrap()),
            Box::new(|x| softmax_attention_causal(&x.q, &x.k, &x.v, x.seq_len, x.heads, x.d_k, x.d_v).unwrap()),
        ];
        for f in &forms {
            let (a, b) = (f(&x), f(&y));
            prop_assert_eq!(&a[..keep], &b[..keep]);
        }
    }
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng, std: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gaussian() * std;
        }
    }
}

fn tiny_block(d_cond: usize) -> (GlaBlock, ParamStore<f64>) {
    let mut cfg = BlockConfig::new(4, 2, d_cond);
    cfg.mlp_hidden = 6;
    let block = GlaBlock::new("blk", cfg).unwrap();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(9);
    block.init(&mut store, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.3);
    (block, store)
}

#[test]
fn block_gradient_check() {
    let (block, store) = tiny_block(3);
    let mut rng = Rng::new(10);
    let (batch, t) = (2, 4);
    let x: Tensor<f64> = rng.gaussian_tensor(&[batch * t, 4]);
    let c: Tensor<f64> = rng.gaussian_tensor(&[batch, 3]);
    let w: Tensor<f64> = rng.gaussian_tensor(&[batch * t, 4]);
    let obj = StoreObjective {
        template: &store,
        f: |tape: &mut Tape<f64>| {
            let xv = tape.constant(x.clone());
            let cv = tape.constant(c.clone());
            let y = block.forward(tape, xv, Some(cv), batch, t)?;
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv)?;
            tape.sum(p)
        },
    };
    let err = grad_check(&obj, &obj.params(), 1e-5).unwrap();
    assert!(err < 1e-3, "block grad error {err}");
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((v, g), b)| (v - m) * r * g + b)
        .collect()
}

fn lin(store: &ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.get(&format!("{name}.w")).unwrap();
    let b = store.get(&format!("{name}.b")).unwrap().data();
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|j| b[j] + (0..din).map(|i| x[i] * w.data()[i * dout + j]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Token-at-a-time replay of one conditioned block over a single sequence.
fn block_oracle(store: &ParamStore<f64>, x: &[Vec<f64>], cond: &[f64]) -> Vec<Vec<f64>> {
    let (d, h_n, dk) = (4, 2, 2);
    let p = |n: &str| store.get(&format!("blk.{n}")).unwrap().data().to_vec();
    let m = lin(store, "blk.mod", cond);
    let (sh1, sc1, sh2, sc2) = (&m[0..d], &m[d..2 * d], &m[2 * d..3 * d], &m[3 * d..]);
    let modulate = |h: Vec<f64>, sh: &[f64], sc: &[f64]| -> Vec<f64> {
        h.iter()
            .enumerate()
            .map(|(i, v)| v + v * sc[i] + sh[i])
            .collect()
    };
    let mut s = vec![vec![vec![0.0; dk]; dk]; h_n];
    let mut out = Vec::new();
    for xt in x {
        let h = modulate(ln(xt, &p("ln1.g"), &p("ln1.b")), sh1, sc1);
        let q: Vec<f64> = lin(store, "blk.wq", &h)
            .iter()
            .map(|v| v / (dk as f64).sqrt())
            .collect();
        let k = lin(store, "blk.wk", &h);
        let v = lin(store, "blk.wv", &h);
        let a: Vec<f64> = lin(store, "blk.wa", &h)
            .iter()
            .map(|z| (1.0 / (1.0 + (-z.clamp(-12.0, 12.0)).exp())).powf(1.0 / 16.0))
            .collect();
        let mut o = vec![0.0; h_n * dk];
        for hh in 0..h_n {
            for i in 0..dk {
                for j in 0..dk {
                    s[hh][i][j] = a[hh * dk + i] * s[hh][i][j] + k[hh * dk + i] * v[hh * dk + j];
                }
            }
            for j in 0..dk {
                o[hh * dk + j] = (0..dk).map(|i| q[hh * dk + i] * s[hh][i][j]).sum();
            }
        }
        let x1: Vec<f64> = xt
            .iter()
            .zip(lin(store, "blk.wo", &o))
            .map(|(a, b)| a + b)
            .collect();
        let h = modulate(ln(&x1, &p("ln2.g"), &p("ln2.b")), sh2, sc2);
        let h: Vec<f64> = lin(store, "blk.w1", &h).into_iter().map(gelu).collect();
        out.push(
            x1.iter()
                .zip(lin(store, "blk.w2", &h))
                .map(|(a, b)| a + b)
                .collect(),
        );
    }
    out
}

#[test]
fn block_matches_replay_oracle() {
    let (block, store) = tiny_block(3);
    let mut rng = Rng::new(11);
    let rows: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..4).map(|_| rng.gaussian()).collect())
        .collect();
    let cond: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
    let mut tape = Tape::<f64>::new();
    tape.bind(&store, false).unwrap();
    let xv = tape.constant(Tensor::new(vec![4, 4], rows.concat()).unwrap());
    let cv = tape.constant(Tensor::new(vec![1, 3], cond.clone()).unwrap());
    let y = block.forward(&mut tape, xv, Some(cv), 1, 4).unwrap();
    let want = block_oracle(&store, &rows, &cond).concat();
    assert!(max_diff(tape.value(y).data(), &want) < 1e-12);
}

#[test]
fn block_batches_are_independent() {
    let (block, store) = tiny_block(3);
    let mut rng = Rng::new(12);
    let x: Tensor<f64> = rng.gaussian_tensor(&[3 * 5, 4]);
    let c: Tensor<f64> = rng.gaussian_tensor(&[3, 3]);
    let run = |x: Tensor<f64>, c: Tensor<f64>, b: usize| {
        let mut tape = Tape::<f64>::new();
        tape.bind(&store, false).unwrap();
        let xv = tape.constant(x);
        let cv = tape.constant(c);
        let y = block.forward(&mut tape, xv, Some(cv), b, 5).unwrap();
        tape.value(y).clone()
    };
    let all = run(x.clone(), c.clone(), 3);
    for b in 0..3 {
        let one = run(x.rows(b * 5, 5).unwrap(), c.rows(b, 1).unwrap(), 1);
        assert_eq!(one.data(), all.rows(b * 5, 5).unwrap().data());
    }
}
