#![allow(dead_code)]

use motionlcm::consistency::{distill_loss, BoundaryCoeffs};
use motionlcm::controlnet::{
    control_loss, prepare_signal, stack_signals, ControlBatch, ControlNet,
};
use motionlcm::diffusion::{diffusion_loss, Denoiser, DenoiserConfig, LatentNorm, NoiseSchedule};
use motionlcm::motion::{gen_synthetic, make_signal, MaskPattern, MotionSequence, NormStats};
use motionlcm::numerics::{grad_check, ParamStore, Rng, StoreObjective, Tape, Tensor};
use motionlcm::vae::{vae_loss, Vae, VaeConfig};

pub fn tiny_vae() -> Vae {
    Vae::new(VaeConfig {
        frames: 16,
        tokens: 2,
        d_z: 2,
        d_model: 4,
        heads: 2,
        blocks: 1,
    })
    .unwrap()
}

pub fn tiny_den() -> Denoiser {
    Denoiser::new(
        "den",
        DenoiserConfig {
            tokens: 2,
            d_z: 2,
            d_model: 4,
            heads: 2,
            labels: 4,
        },
    )
    .unwrap()
}

pub fn tiny_sched() -> NoiseSchedule {
    NoiseSchedule::cosine(20, 0.008).unwrap()
}

pub fn tiny_motions(n: usize) -> Vec<MotionSequence> {
    (0..n)
        .map(|i| gen_synthetic(["walk", "wave", "circle"][i % 3], 100 + i as u64, 16).unwrap())
        .collect()
}

pub const FD_STEP: f64 = 1e-5;

pub fn vae_grad_error() -> f64 {
    let vae = tiny_vae();
    let store = vae.init::<f64>(&mut Rng::new(1)).unwrap();
    let ms = tiny_motions(2);
    let stats = NormStats::compute(&ms).unwrap();
    let norm: Vec<Tensor<f64>> = ms
        .iter()
        .map(|m| stats.normalize(&m.frames).unwrap().cast())
        .collect();
    let x = vae.patchify(&norm.iter().collect::<Vec<_>>()).unwrap();
    let eps: Tensor<f64> = Rng::new(2).gaussian_tensor(&[4, 2]);
    let obj = StoreObjective {
        template: &store,
        f: |tape: &mut Tape<f64>| Ok(vae_loss(tape, &vae, x.clone(), eps.clone(), 2, 0.1)?.0),
    };
    grad_check(&obj, &obj.params(), FD_STEP).unwrap()
}

pub fn diffusion_grad_error() -> f64 {
    let den = tiny_den();
    let store = den.init::<f64>(&mut Rng::new(3)).unwrap();
    let mut rng = Rng::new(4);
    let z0: Tensor<f64> = rng.gaussian_tensor(&[6, 2]);
    let eps: Tensor<f64> = rng.gaussian_tensor(&[6, 2]);
    let sched = tiny_sched();
    let obj = StoreObjective {
        template: &store,
        f: |tape: &mut Tape<f64>| {
            diffusion_loss(tape, &den, &z0, &[3, 11, 20], &[1, 0, 3], &eps, &sched)
        },
    };
    grad_check(&obj, &obj.params(), FD_STEP).unwrap()
}

pub fn distill_grad_error() -> f64 {
    let den = tiny_den();
    let store = den.init::<f64>(&mut Rng::new(5)).unwrap();
    let mut rng = Rng::new(6);
    let z_t: Tensor<f64> = rng.gaussian_tensor(&[6, 2]);
    let target: Tensor<f64> = rng.gaussian_tensor(&[6, 2]);
    let coeffs = BoundaryCoeffs::new(20);
    let obj = StoreObjective {
        template: &store,
        f: |tape: &mut Tape<f64>| {
            distill_loss(tape, &den, &z_t, &[5, 12, 20], &[2, 1, 3], &target, &coeffs)
        },
    };
    grad_check(&obj, &obj.params(), FD_STEP).unwrap()
}

/// Branch parameters with the zero projections replaced by random values,
/// so every path into the loss carries gradient.
pub fn perturbed_controlnet(
    den: &Denoiser,
    base: &ParamStore<f64>,
    seed: u64,
) -> (ControlNet, ParamStore<f64>) {
    let net = ControlNet::new(den).unwrap();
    let mut rng = Rng::new(seed);
    let mut ctrl = net.init(den, base, &mut rng).unwrap();
    for (name, t) in ctrl.iter_mut() {
        if name.contains(".zero") {
            let shape = t.shape().to_vec();
            *t = rng.gaussian_tensor::<f64>(&shape).map(|v| 0.3 * v);
        }
    }
    (net, ctrl)
}

pub struct ControlFixture {
    pub vae: Vae,
    pub den: Denoiser,
    pub vae_params: ParamStore<f64>,
    pub base: ParamStore<f64>,
    pub net: ControlNet,
    pub ctrl: ParamStore<f64>,
    pub norm: LatentNorm,
    pub batch: ControlBatch<f64>,
    pub motions: Vec<MotionSequence>,
    pub stats: NormStats,
}

pub fn control_fixture() -> ControlFixture {
    let vae = tiny_vae();
    let den = tiny_den();
    let vae_params = vae.init::<f64>(&mut Rng::new(7)).unwrap();
    let base = den.init::<f64>(&mut Rng::new(8)).unwrap();
    let (net, ctrl) = perturbed_controlnet(&den, &base, 9);
    let motions = tiny_motions(2);
    let stats = NormStats::compute(&motions).unwrap();
    let sigs: Vec<_> = motions
        .iter()
        .zip([MaskPattern::Root, MaskPattern::RootAndFeet])
        .map(|(m, p)| prepare_signal(&make_signal(m, p, 4), &stats, 2).unwrap())
        .collect();
    let (f, t, m, count) = stack_signals(&sigs.iter().collect::<Vec<_>>()).unwrap();
    let mut rng = Rng::new(10);
    let batch = ControlBatch {
        z0: rng.gaussian_tensor(&[4, 2]),
        ts: vec![4, 17],
        labels: vec![1, 3],
        eps: rng.gaussian_tensor(&[4, 2]),
        features: f.cast(),
        targets: t.cast(),
        mask: m.cast(),
        count,
    };
    ControlFixture {
        vae,
        den,
        vae_params,
        base,
        net,
        ctrl,
        norm: LatentNorm {
            mean: vec![0.1, -0.2],
            std: vec![1.5, 0.7],
        },
        batch,
        motions,
        stats,
    }
}

pub fn control_grad_error() -> f64 {
    let fx = control_fixture();
    let sched = tiny_sched();
    let obj = StoreObjective {
        template: &fx.ctrl,
        f: |tape: &mut Tape<f64>| {
            tape.bind(&fx.base, false)?;
            tape.bind(&fx.vae_params, false)?;
            Ok(control_loss(
                tape, &fx.net, &fx.den, &fx.vae, &fx.norm, &fx.batch, &sched, 1.0,
            )?
            .total)
        },
    };
    grad_check(&obj, &obj.params(), FD_STEP).unwrap()
}
