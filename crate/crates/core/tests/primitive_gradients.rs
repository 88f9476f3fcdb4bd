use motionlcm::numerics::{grad_check, Primitive, Rng, Tape, TapeObjective, Tensor, Var};
use proptest::prelude::*;

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.gaussian_tensor(shape)
}

/// Weighted sum of the primitive output with fixed random weights, so the
/// scalar depends on every output entry.
fn check(prim: Primitive, inputs: Vec<Tensor<f64>>, seed: u64) -> f64 {
    let probe = {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = tape.apply(prim.clone(), &vars).unwrap();
        tape.value(y).shape().to_vec()
    };
    let w: Tensor<f64> = Rng::new(seed ^ 0xABCD).gaussian_tensor(&probe);
    let obj = TapeObjective(move |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.apply(prim.clone(), v)?;
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv)?;
        t.sum(p)
    });
    grad_check(&obj, &inputs, 1e-5).unwrap()
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=8, 1usize..=8, 1usize..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_unary((m, n, _) in dims(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        for prim in [Primitive::Sigmoid, Primitive::Tanh, Primitive::Gelu, Primitive::Exp,
                     Primitive::Scale(-1.7), Primitive::SoftmaxLastAxis, Primitive::ReduceSum,
                     Primitive::ReduceMean, Primitive::Transpose, Primitive::Reshape(vec![n, m])] {
            let x = randn(&mut rng, &[m, n]);
            prop_assert!(check(prim.clone(), vec![x], seed) < 1e-6, "{prim:?}");
        }
        let pos = randn(&mut rng, &[m, n]).map(|v| 0.5 + v.abs());
        prop_assert!(check(Primitive::Log, vec![pos], seed) < 1e-6);
        // Away from the kinks at +-1.
        let x = randn(&mut rng, &[m, n]).map(|v| if (v.abs() - 1.0).abs() < 0.05 { 0.0 } else { v });
        let e = check(Primitive::Clamp { lo: -1.0, hi: 1.0 }, vec![x], seed);
        prop_assert!(e < 1e-6);
        let gates = randn(&mut rng, &[m, n]).map(|v| 0.5 + 0.4 * v.tanh());
        prop_assert!(check(Primitive::CumprodTimeAxis, vec![gates], seed) < 1e-6);
    }

    #[test]
    fn binary((m, k, n) in dims(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = randn(&mut rng, &[m, k]);
        let b = randn(&mut rng, &[k, n]);
        prop_assert!(check(Primitive::Matmul, vec![a.clone(), b], seed) < 1e-6);
        for prim in [Primitive::Add, Primitive::Sub, Primitive::Mul, Primitive::Mse] {
            let b = randn(&mut rng, &[m, k]);
            prop_assert!(check(prim.clone(), vec![a.clone(), b], seed) < 1e-6, "{prim:?}");
        }
        for prim in [Primitive::Add, Primitive::Sub, Primitive::Mul] {
            let row = randn(&mut rng, &[k]);
            prop_assert!(check(prim.clone(), vec![a.clone(), row], seed) < 1e-6, "broadcast {prim:?}");
        }
    }

    #[test]
    fn structural((m, k, n) in dims(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = randn(&mut rng, &[m, k]);
        let b = randn(&mut rng, &[m, n]);
        let e = check(Primitive::Concat { axis: 1 }, vec![a.clone(), b], seed);
        prop_assert!(e < 1e-6);
        let c = randn(&mut rng, &[n, k]);
        let e = check(Primitive::Concat { axis: 0 }, vec![a.clone(), c], seed);
        prop_assert!(e < 1e-6);
        let start = rng.below(k);
        let len = 1 + rng.below(k - start);
        let e = check(Primitive::Slice { axis: 1, start, len }, vec![a.clone()], seed);
        prop_assert!(e < 1e-6);
        let idx: Vec<usize> = (0..n + 2).map(|_| rng.below(m)).collect();
        prop_assert!(check(Primitive::GatherRows(idx), vec![a.clone()], seed) < 1e-6);
        // Non-degenerate rows: offset so the variance is well away from zero.
        let x = randn(&mut rng, &[m, k + 1]).map(|v| 2.0 * v);
        let g = randn(&mut rng, &[k + 1]);
        let bias = randn(&mut rng, &[k + 1]);
        prop_assert!(check(Primitive::LayerNorm, vec![x, g, bias], seed) < 1e-6);
    }

    #[test]
    fn softmax_rows_and_layer_norm_moments((m, n, _) in dims(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(randn(&mut rng, &[m, n + 1]));
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks(n + 1) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let d = n + 3;
        let x = tape.constant(randn(&mut rng, &[m, d]).map(|v| 3.0 * v + 1.0));
        let g = tape.constant(Tensor::ones(vec![d]));
        let b = tape.constant(Tensor::zeros(vec![d]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let input = tape.value(x).clone();
        for (row, xin) in tape.value(y).data().chunks(d).zip(input.data().chunks(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let xm = xin.iter().sum::<f64>() / d as f64;
            let xv = xin.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-6);
            // eps = 1e-5 shrinks variance by xv / (xv + eps).
            let expected = xv / (xv + 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4 || (var - expected).abs() < 1e-9, "var {var} xv {xv}");
        }
    }
}

#[test]
fn tape_replay_is_bit_identical() {
    let run = || {
        let mut rng = Rng::new(99);
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(rng.gaussian_tensor(&[6, 5]), true);
        let b = tape.leaf(rng.gaussian_tensor(&[5, 4]), true);
        let y = tape.matmul(a, b).unwrap();
        let y = tape.gelu(y).unwrap();
        let z = tape.constant(Tensor::zeros(vec![6, 4]));
        let l = tape.mse(y, z).unwrap();
        tape.value(l).item().unwrap().to_bits()
    };
    assert_eq!(run(), run());
}
