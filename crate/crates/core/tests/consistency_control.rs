mod common;

use motionlcm::consistency::{
    consistency_apply, ema_update, sample_lcm, teacher_solve, BoundaryCoeffs, ConsistencyModel,
};
use motionlcm::controlnet::{
    control_loss, prepare_signal, ControlNet, ControlledModel, CONTROL_FEATURES,
};
use motionlcm::diffusion::{q_sample, LatentModel};
use motionlcm::motion::{gen_synthetic, make_signal, ControlSignal, MaskPattern, NormStats};
use motionlcm::numerics::{ParamStore, Rng, Tape, Tensor};
use motionlcm::Result;
use proptest::prelude::*;

/// Predicts the same clean latent for every sequence in the batch.
struct Oracle(Tensor<f32>);

impl LatentModel for Oracle {
    fn predict(
        &self,
        _: &Tensor<f32>,
        ts: &[usize],
        _: &[usize],
        _: &[usize],
    ) -> Result<Tensor<f32>> {
        Tensor::stack_rows(&vec![self.0.clone(); ts.len()])
    }
}

#[test]
fn teacher_solve_with_exact_clean_prediction_follows_the_forward_process() {
    let sched = common::tiny_sched();
    let mut rng = Rng::new(21);
    let z0: Tensor<f32> = rng.gaussian_tensor(&[2, 2]);
    let eps: Tensor<f32> = rng.gaussian_tensor(&[2, 2]);
    for (t, s) in [(20, 15), (9, 4), (5, 0)] {
        let zt = q_sample(&z0, t, &eps, &sched).unwrap();
        let got = teacher_solve(&Oracle(z0.clone()), &zt, &[t], &[s], &[1], 2.0, &sched).unwrap();
        let want = q_sample(&z0, s, &eps, &sched).unwrap();
        assert!(
            got.max_abs_diff(&want) < 1e-5,
            "t={t}: {}",
            got.max_abs_diff(&want)
        );
    }
}

#[test]
fn lcm_sampler_counts_evaluations_and_is_seeded() {
    let sched = common::tiny_sched();
    let z0: Tensor<f32> = Rng::new(3).gaussian_tensor(&[2, 2]);
    for steps in [1, 2, 4] {
        let out = sample_lcm(
            &Oracle(z0.clone()),
            &sched,
            &[1, 2],
            &mut [Rng::new(0), Rng::new(1)],
            steps,
            2,
            2,
        )
        .unwrap();
        assert_eq!(out.evals, vec![steps; 2]);
        assert_eq!(out.trajectory.len(), steps);
        assert_eq!(out.latents.rows(2, 2).unwrap(), z0);
    }
    assert!(sample_lcm(
        &Oracle(z0.clone()),
        &sched,
        &[1],
        &mut [Rng::new(0)],
        0,
        2,
        2
    )
    .is_err());

    let den = common::tiny_den();
    let params = den.init::<f32>(&mut Rng::new(4)).unwrap();
    let m = ConsistencyModel {
        den: &den,
        params: &params,
        coeffs: BoundaryCoeffs::new(sched.t_diff),
    };
    let draw = |seed| {
        sample_lcm(&m, &sched, &[3], &mut [Rng::new(seed)], 3, 2, 2)
            .unwrap()
            .latents
    };
    assert_eq!(draw(7), draw(7));
    assert_ne!(draw(7), draw(8));
}

#[test]
fn ema_rejects_bad_rates_and_mismatched_layouts() {
    let den = common::tiny_den();
    let a = den.init::<f32>(&mut Rng::new(1)).unwrap();
    let mut b = a.clone();
    assert!(ema_update(&mut b, &a, 1.5).is_err());
    assert!(ema_update(&mut b, &ParamStore::new(), 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ema_contracts_towards_online(seed in 0u64..1000, mu in 0.0f64..=1.0) {
        let den = common::tiny_den();
        let online = den.init::<f32>(&mut Rng::new(seed)).unwrap();
        let mut target = den.init::<f32>(&mut Rng::new(seed + 1)).unwrap();
        let before = target.distance(&online).unwrap();
        ema_update(&mut target, &online, mu).unwrap();
        let after = target.distance(&online).unwrap();
        prop_assert!((after - mu * before).abs() <= 1e-5 * (1.0 + before));
    }

    #[test]
    fn boundary_is_identity_at_zero_and_blends_elsewhere(seed in 0u64..1000, t in 1usize..=100) {
        let c = BoundaryCoeffs::new(100);
        let mut rng = Rng::new(seed);
        let z: Tensor<f64> = rng.gaussian_tensor(&[3, 4]);
        let f: Tensor<f64> = rng.gaussian_tensor(&[3, 4]);
        prop_assert_eq!(consistency_apply(&f, &z, 0, &c).unwrap(), z.clone());
        let out = consistency_apply(&f, &z, t, &c).unwrap();
        for i in 0..z.len() {
            let want = c.c_skip(t) * z.data()[i] + c.c_out(t) * f.data()[i];
            prop_assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn control_gradients_reach_only_the_branch() {
    let fx = common::control_fixture();
    let sched = common::tiny_sched();
    let mut tape = Tape::<f64>::new();
    tape.bind(&fx.base, false).unwrap();
    tape.bind(&fx.vae_params, false).unwrap();
    tape.bind(&fx.ctrl, true).unwrap();
    let loss = control_loss(
        &mut tape, &fx.net, &fx.den, &fx.vae, &fx.norm, &fx.batch, &sched, 1.0,
    )
    .unwrap();
    let grads = tape.backward(loss.total).unwrap();
    for (name, _) in fx.base.iter().chain(fx.vae_params.iter()) {
        assert!(
            grads.param(name).is_none(),
            "frozen `{name}` received a gradient"
        );
    }
    for (name, _) in fx.ctrl.iter() {
        assert!(
            grads.param(name).is_some(),
            "branch `{name}` has no gradient"
        );
    }
}

#[test]
fn control_features_only_see_masked_frames() {
    let m = gen_synthetic("walk", 5, 64).unwrap();
    let other = gen_synthetic("circle", 6, 64).unwrap();
    let stats = NormStats::compute(&[m.clone(), other.clone()]).unwrap();
    let sig = make_signal(&m, MaskPattern::RightHand, 4);
    let p = prepare_signal(&sig, &stats, 8).unwrap();
    assert_eq!(p.features.shape(), &[8, CONTROL_FEATURES]);

    // Moving unmasked targets changes nothing.
    let mut t2 = sig.targets.clone();
    for f in 0..64 {
        for j in 0..5 {
            if !sig.is_set(f, j) {
                for c in 0..3 {
                    t2.data_mut()[(f * 5 + j) * 3 + c] = 1e3;
                }
            }
        }
    }
    let moved = prepare_signal(
        &ControlSignal::new(sig.mask.clone(), t2).unwrap(),
        &stats,
        8,
    )
    .unwrap();
    assert_eq!(moved.features, p.features);

    // A masked target only touches the token holding its frame.
    let mut t3 = sig.targets.clone();
    t3.data_mut()[(20 * 5 + 2) * 3] += 0.5;
    let nudged = prepare_signal(
        &ControlSignal::new(sig.mask.clone(), t3).unwrap(),
        &stats,
        8,
    )
    .unwrap();
    for tok in 0..8 {
        let a = p.features.rows(tok, 1).unwrap();
        let b = nudged.features.rows(tok, 1).unwrap();
        assert_eq!(a == b, tok != 20 / 8, "token {tok}");
    }
}

#[test]
fn zero_initialised_branch_reproduces_the_base_model() {
    let den = common::tiny_den();
    let base = den.init::<f32>(&mut Rng::new(30)).unwrap();
    let net = ControlNet::new(&den).unwrap();
    let ctrl = net.init(&den, &base, &mut Rng::new(31)).unwrap();
    let feats: Tensor<f32> = Rng::new(32).gaussian_tensor(&[2, CONTROL_FEATURES]);
    let z: Tensor<f32> = Rng::new(33).gaussian_tensor(&[4, 2]);
    let plain = den.predict(&base, &z, &[3, 17], &[1, 0]).unwrap();
    let m = ControlledModel {
        net: &net,
        den: &den,
        base: &base,
        ctrl: &ctrl,
        features: vec![feats.clone(), feats],
        consistency: None,
    };
    assert_eq!(m.predict(&z, &[3, 17], &[1, 0], &[0, 1]).unwrap(), plain);
}
