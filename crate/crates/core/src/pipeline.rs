//! Stage runners behind the command line: each reads its upstream
//! artifacts, checks the hash chain, and writes one checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{file_hash, write_atomic, Checkpoint, Upstream};
use crate::consistency::{
    sample_lcm, train_distill, BoundaryCoeffs, ConsistencyModel, DistillConfig,
};
use crate::controlnet::{
    prepare_signal, train_controlnet, training_signals, ControlNet, ControlTrainConfig,
    ControlledModel,
};
use crate::diffusion::{
    decode_latents, prepare_latents, sample_ddim, train_diffusion, Denoiser, DenoiserConfig,
    DiffusionTrainConfig, LatentModel, LatentNorm, NoiseSchedule, SampleConfig, TeacherModel,
    COSINE_OFFSET,
};
use crate::error::{Error, Result};
use crate::motion::{
    centroid_accuracy, diversity, load_motion, load_signal, save_motion, trajectory_error,
    ControlSignal, Corpus, CorpusManifest, CorpusSpec, MotionSequence, NormStats, Vocab,
};
use crate::numerics::{ParamStore, Rng};
use crate::train::TrainLog;
use crate::vae::{normalized, reconstruction_mse, train_vae, Vae, VaeConfig, VaeTrainConfig};

pub const STAGE_VAE: &str = "vae";
pub const STAGE_TEACHER: &str = "teacher";
pub const STAGE_LCM: &str = "lcm";
pub const STAGE_CONTROLNET: &str = "controlnet";
pub const STAGE_CORPUS: &str = "corpus";

/// What a training stage produced.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub path: PathBuf,
    pub hash: String,
    pub log: TrainLog,
    pub seconds: f64,
    /// Stage-specific numbers also stored in the checkpoint meta.
    pub summary: serde_json::Value,
}

pub fn gen_data(out: &Path, spec: CorpusSpec) -> Result<PathBuf> {
    if spec.train == 0 || spec.heldout == 0 {
        return Err(Error::contract(
            "train and held-out counts must both be positive",
        ));
    }
    Corpus::generate(spec)?.save(out)
}

fn write_curve(path: Option<&Path>, log: &TrainLog) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, log.to_csv().as_bytes()),
        None => Ok(()),
    }
}

/// Saves the checkpoint; a diverged run still writes its last good
/// parameters before reporting the divergence.
fn finish_stage(
    mut ck: Checkpoint,
    out: &Path,
    curve: Option<&Path>,
    log: TrainLog,
    start: Instant,
    summary: serde_json::Value,
) -> Result<StageReport> {
    if let Some(step) = log.diverged {
        ck.meta["diverged_at"] = json!(step);
    }
    ck.meta["summary"] = summary.clone();
    let hash = ck.save(out)?;
    write_curve(curve, &log)?;
    log.check()?;
    Ok(StageReport {
        path: out.to_path_buf(),
        hash,
        log,
        seconds: start.elapsed().as_secs_f64(),
        summary,
    })
}

fn meta_field<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck
        .meta
        .get(key)
        .ok_or_else(|| Error::Corrupt(format!("`{}` checkpoint meta lacks `{key}`", ck.stage)))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::Corrupt(format!("`{}` meta `{key}`: {e}", ck.stage)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeStageConfig {
    pub seed: u64,
    pub model: VaeConfig,
    pub train: VaeTrainConfig,
}

pub fn train_vae_stage(
    manifest: &Path,
    out: &Path,
    curve: Option<&Path>,
    cfg: &VaeStageConfig,
) -> Result<StageReport> {
    let start = Instant::now();
    let corpus = Corpus::load(manifest)?;
    let corpus_hash = file_hash(manifest)?;
    let vae = Vae::new(cfg.model)?;
    let run = train_vae(&vae, &corpus, &cfg.train, &mut Rng::new(cfg.seed))?;
    let mse = reconstruction_mse(&vae, &run.params, &normalized(&corpus, true)?)?;
    let mut ck = Checkpoint::new(STAGE_VAE, run.params);
    ck.upstream.push(Upstream {
        stage: STAGE_CORPUS.into(),
        hash: corpus_hash,
    });
    ck.meta = json!({ "config": cfg, "stats": corpus.stats, "frozen": true });
    finish_stage(
        ck,
        out,
        curve,
        run.log,
        start,
        json!({ "heldout_mse": mse }),
    )
}

pub struct LoadedVae {
    pub vae: Vae,
    pub params: ParamStore<f32>,
    pub stats: NormStats,
    pub hash: String,
}

pub fn load_vae(path: &Path) -> Result<LoadedVae> {
    let (ck, hash) = Checkpoint::load(path, STAGE_VAE)?;
    let cfg: VaeStageConfig = meta_field(&ck, "config")?;
    if ck.meta.get("frozen") != Some(&json!(true)) {
        return Err(Error::Corrupt("vae checkpoint is not marked frozen".into()));
    }
    Ok(LoadedVae {
        vae: Vae::new(cfg.model)?,
        stats: meta_field(&ck, "stats")?,
        params: ck.tensors,
        hash,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherStageConfig {
    pub seed: u64,
    pub model: DenoiserConfig,
    pub t_diff: usize,
    pub train: DiffusionTrainConfig,
}

impl Default for TeacherStageConfig {
    fn default() -> Self {
        Self {
            seed: 2,
            model: DenoiserConfig::default(),
            t_diff: crate::diffusion::DEFAULT_STEPS,
            train: DiffusionTrainConfig::default(),
        }
    }
}

pub fn train_teacher_stage(
    manifest: &Path,
    vae_path: &Path,
    out: &Path,
    curve: Option<&Path>,
    cfg: &TeacherStageConfig,
) -> Result<StageReport> {
    let start = Instant::now();
    let v = load_vae(vae_path)?;
    let corpus = Corpus::load(manifest)?;
    let data = prepare_latents(&v.vae, &v.params, &corpus)?;
    let den = Denoiser::new("den", cfg.model)?;
    let sched = NoiseSchedule::cosine(cfg.t_diff, COSINE_OFFSET)?;
    let (params, log) = train_diffusion(&den, &data, &sched, &cfg.train, &mut Rng::new(cfg.seed))?;
    let (head, tail) = log.head_tail(100);
    let mut ck = Checkpoint::new(STAGE_TEACHER, params);
    ck.upstream.push(Upstream {
        stage: STAGE_VAE.into(),
        hash: v.hash,
    });
    ck.meta = json!({ "config": cfg, "latent_norm": data.norm });
    finish_stage(
        ck,
        out,
        curve,
        log,
        start,
        json!({ "loss_head": head, "loss_tail": tail }),
    )
}

/// A teacher or distilled denoiser, ready for sampling.
pub struct LoadedDenoiser {
    pub stage: String,
    pub den: Denoiser,
    pub params: ParamStore<f32>,
    pub norm: LatentNorm,
    pub sched: NoiseSchedule,
    pub hash: String,
    /// Hash of the teacher this model descends from (its own hash for a teacher).
    pub teacher_hash: String,
    /// Baked-in guidance weight of a distilled model.
    pub distilled_guidance: Option<f64>,
}

fn check_vae(ck: &Checkpoint, vae: &LoadedVae) -> Result<()> {
    ck.verify_upstream(STAGE_VAE, &vae.hash)
}

/// Loads a teacher or distilled checkpoint and verifies it against `vae`.
pub fn load_denoiser(path: &Path, vae: &LoadedVae) -> Result<LoadedDenoiser> {
    if !path.exists() {
        return Err(Error::Missing(format!(
            "denoiser checkpoint {}",
            path.display()
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let hash = crate::checkpoint::sha256_hex(&bytes);
    check_vae(&ck, vae)?;
    let (model, t_diff, teacher_hash, distilled_guidance) = match ck.stage.as_str() {
        STAGE_TEACHER => {
            let c: TeacherStageConfig = meta_field(&ck, "config")?;
            (c.model, c.t_diff, hash.clone(), None)
        }
        STAGE_LCM => {
            let c: DistillStageConfig = meta_field(&ck, "config")?;
            let th = ck
                .upstream_hash(STAGE_TEACHER)
                .ok_or_else(|| Error::Corrupt("lcm checkpoint lacks its teacher hash".into()))?;
            (c.model, c.t_diff, th.to_string(), Some(c.distill.guidance))
        }
        other => {
            return Err(Error::Corrupt(format!(
                "{} holds stage `{other}`, expected `teacher` or `lcm`",
                path.display()
            )))
        }
    };
    Ok(LoadedDenoiser {
        stage: ck.stage.clone(),
        den: Denoiser::new("den", model)?,
        norm: meta_field(&ck, "latent_norm")?,
        sched: NoiseSchedule::cosine(t_diff, COSINE_OFFSET)?,
        params: ck.tensors,
        hash,
        teacher_hash,
        distilled_guidance,
    })
}

pub fn load_teacher(path: &Path, vae: &LoadedVae) -> Result<LoadedDenoiser> {
    let t = load_denoiser(path, vae)?;
    if t.stage != STAGE_TEACHER {
        return Err(Error::Corrupt(format!(
            "{} holds stage `{}`, expected `teacher`",
            path.display(),
            t.stage
        )));
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillStageConfig {
    pub seed: u64,
    pub model: DenoiserConfig,
    pub t_diff: usize,
    pub distill: DistillConfig,
}

impl Default for DistillStageConfig {
    fn default() -> Self {
        Self {
            seed: 3,
            model: DenoiserConfig::default(),
            t_diff: crate::diffusion::DEFAULT_STEPS,
            distill: DistillConfig::default(),
        }
    }
}

pub fn distill_stage(
    manifest: &Path,
    vae_path: &Path,
    teacher_path: &Path,
    out: &Path,
    curve: Option<&Path>,
    seed: u64,
    distill: &DistillConfig,
) -> Result<StageReport> {
    let start = Instant::now();
    let v = load_vae(vae_path)?;
    let t = load_teacher(teacher_path, &v)?;
    let corpus = Corpus::load(manifest)?;
    let data = prepare_latents(&v.vae, &v.params, &corpus)?;
    if data.norm != t.norm {
        return Err(Error::Corrupt(
            "teacher latent statistics disagree with the vae and corpus".into(),
        ));
    }
    let run = train_distill(
        &t.den,
        &t.params,
        &data,
        &t.sched,
        distill,
        &mut Rng::new(seed),
    )?;
    let (head, tail) = run.log.head_tail(100);
    let cfg = DistillStageConfig {
        seed,
        model: t.den.cfg,
        t_diff: t.sched.t_diff,
        distill: *distill,
    };
    let mut ck = Checkpoint::new(STAGE_LCM, run.online);
    ck.upstream = vec![
        Upstream {
            stage: STAGE_VAE.into(),
            hash: v.hash,
        },
        Upstream {
            stage: STAGE_TEACHER.into(),
            hash: t.hash,
        },
    ];
    ck.meta = json!({ "config": cfg, "latent_norm": t.norm, "coeffs": BoundaryCoeffs::new(t.sched.t_diff) });
    finish_stage(
        ck,
        out,
        curve,
        run.log,
        start,
        json!({ "loss_head": head, "loss_tail": tail }),
    )
}

pub fn controlnet_stage(
    manifest: &Path,
    vae_path: &Path,
    teacher_path: &Path,
    out: &Path,
    curve: Option<&Path>,
    seed: u64,
    train: &ControlTrainConfig,
) -> Result<StageReport> {
    let start = Instant::now();
    let v = load_vae(vae_path)?;
    let t = load_teacher(teacher_path, &v)?;
    let corpus = Corpus::load(manifest)?;
    let data = prepare_latents(&v.vae, &v.params, &corpus)?;
    if data.norm != t.norm {
        return Err(Error::Corrupt(
            "teacher latent statistics disagree with the vae and corpus".into(),
        ));
    }
    let net = ControlNet::new(&t.den)?;
    let signals = training_signals(&corpus.train, &corpus.stats, t.den.cfg.tokens, train.stride)?;
    let (params, log) = train_controlnet(
        &net,
        &t.den,
        &t.params,
        &v.vae,
        &v.params,
        &data,
        &signals,
        &t.sched,
        train,
        &mut Rng::new(seed),
    )?;
    let (head, tail) = log.head_tail(100);
    let mut ck = Checkpoint::new(STAGE_CONTROLNET, params);
    ck.upstream = vec![
        Upstream {
            stage: STAGE_VAE.into(),
            hash: v.hash,
        },
        Upstream {
            stage: STAGE_TEACHER.into(),
            hash: t.hash,
        },
    ];
    ck.meta = json!({ "seed": seed, "train": train });
    finish_stage(
        ck,
        out,
        curve,
        log,
        start,
        json!({ "loss_head": head, "loss_tail": tail }),
    )
}

pub struct LoadedControlNet {
    pub net: ControlNet,
    pub params: ParamStore<f32>,
    pub hash: String,
}

/// Refuses a branch trained against a different teacher or VAE.
pub fn load_controlnet(
    path: &Path,
    base: &LoadedDenoiser,
    vae: &LoadedVae,
) -> Result<LoadedControlNet> {
    let (ck, hash) = Checkpoint::load(path, STAGE_CONTROLNET)?;
    check_vae(&ck, vae)?;
    ck.verify_upstream(STAGE_TEACHER, &base.teacher_hash)?;
    Ok(LoadedControlNet {
        net: ControlNet::new(&base.den)?,
        params: ck.tensors,
        hash,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub label: String,
    pub steps: usize,
    pub count: usize,
    pub seed: u64,
    pub guidance: f64,
    pub control: Option<ControlSignal>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub seconds: f64,
    pub evals: usize,
}

/// Sample `i` draws from `Rng::derive(seed, i)`; each sample is timed alone.
pub fn sample_stage(
    base: &LoadedDenoiser,
    vae: &LoadedVae,
    ctrl: Option<&LoadedControlNet>,
    req: &SampleRequest,
) -> Result<(Vec<MotionSequence>, Vec<SampleRecord>)> {
    let label = Vocab::index(&req.label)?;
    if req.count == 0 {
        return Err(Error::contract("sample count must be positive"));
    }
    let features = match (&req.control, ctrl) {
        (Some(s), Some(_)) => Some(prepare_signal(s, &vae.stats, base.den.cfg.tokens)?.features),
        (Some(_), None) => {
            return Err(Error::contract(
                "a control signal needs a controlnet checkpoint",
            ))
        }
        (None, _) => None,
    };
    let coeffs = base
        .distilled_guidance
        .map(|_| BoundaryCoeffs::new(base.sched.t_diff));
    let (tokens, d_z) = (base.den.cfg.tokens, base.den.cfg.d_z);
    let mut motions = Vec::with_capacity(req.count);
    let mut records = Vec::with_capacity(req.count);
    for i in 0..req.count {
        let mut rngs = [Rng::derive(req.seed, i as u64)];
        let start = Instant::now();
        let controlled = match (ctrl, &features) {
            (Some(c), Some(f)) => Some(ControlledModel {
                net: &c.net,
                den: &base.den,
                base: &base.params,
                ctrl: &c.params,
                features: vec![f.clone()],
                consistency: coeffs,
            }),
            _ => None,
        };
        let plain_teacher = TeacherModel {
            den: &base.den,
            params: &base.params,
        };
        let plain_lcm = coeffs.map(|c| ConsistencyModel {
            den: &base.den,
            params: &base.params,
            coeffs: c,
        });
        let model: &dyn LatentModel = match (&controlled, &plain_lcm) {
            (Some(m), _) => m,
            (None, Some(m)) => m,
            (None, None) => &plain_teacher,
        };
        let out = match coeffs {
            Some(_) => sample_lcm(
                model,
                &base.sched,
                &[label],
                &mut rngs,
                req.steps,
                tokens,
                d_z,
            )?,
            None => sample_ddim(
                model,
                &base.sched,
                &[label],
                &mut rngs,
                SampleConfig {
                    steps: req.steps,
                    guidance: req.guidance,
                },
                tokens,
                d_z,
                false,
            )?,
        };
        let mut m = decode_latents(
            &vae.vae,
            &vae.params,
            &base.norm,
            &vae.stats,
            &out.latents,
            &[label],
        )?;
        let seconds = start.elapsed().as_secs_f64();
        motions.push(m.remove(0));
        records.push(SampleRecord {
            index: i,
            seed: req.seed,
            seconds,
            evals: out.evals[0],
        });
    }
    Ok((motions, records))
}

pub fn timing_csv(records: &[SampleRecord]) -> String {
    let mut s = String::from("sample,seed,seconds,evals\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:.6},{}\n",
            r.index, r.seed, r.seconds, r.evals
        ));
    }
    s
}

pub fn sample_file_name(i: usize) -> String {
    format!("sample_{i:04}.json")
}

/// Writes `sample_NNNN.json` files and `timing.csv` into `dir`.
pub fn write_samples(
    dir: &Path,
    motions: &[MotionSequence],
    records: &[SampleRecord],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in motions.iter().enumerate() {
        save_motion(&dir.join(sample_file_name(i)), m)?;
    }
    write_atomic(&dir.join("timing.csv"), timing_csv(records).as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub centroid_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory_error: Option<f64>,
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Signals, when given, are matched to samples by file name.
pub fn eval_stage(samples: &Path, manifest: &Path, signals: Option<&Path>) -> Result<Metrics> {
    if !manifest.exists() {
        return Err(Error::Missing(format!(
            "corpus manifest {}",
            manifest.display()
        )));
    }
    let man = CorpusManifest::load(manifest)?;
    let centroids = man
        .centroids
        .ok_or_else(|| Error::Missing(format!("centroids in {}", manifest.display())))?;
    let files = json_files(samples)?;
    if files.is_empty() {
        return Err(Error::Missing(format!(
            "motion files in {}",
            samples.display()
        )));
    }
    let motions = files
        .iter()
        .map(|p| load_motion(p))
        .collect::<Result<Vec<_>>>()?;
    let trajectory_error = match signals {
        None => None,
        Some(dir) => {
            let mut total = 0.0;
            for (p, m) in files.iter().zip(&motions) {
                let sp = dir.join(p.file_name().expect("listed file"));
                if !sp.exists() {
                    return Err(Error::Missing(format!("control signal {}", sp.display())));
                }
                total += trajectory_error(m, &load_signal(&sp)?)?;
            }
            Some(total / motions.len() as f64)
        }
    };
    Ok(Metrics {
        count: motions.len(),
        centroid_accuracy: centroid_accuracy(&motions, &centroids)?,
        diversity: if motions.len() >= 2 {
            Some(diversity(&motions)?)
        } else {
            None
        },
        trajectory_error,
    })
}

/// Seeds of the documented end-to-end run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    pub data: u64,
    pub vae: u64,
    pub teacher: u64,
    pub distill: u64,
    pub controlnet: u64,
    pub sample: u64,
}

impl Default for SeedSet {
    fn default() -> Self {
        Self {
            data: 0,
            vae: 1,
            teacher: 2,
            distill: 3,
            controlnet: 4,
            sample: 5,
        }
    }
}

/// Artifact paths of a pipeline run rooted at one directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.json")
    }
    pub fn ckpt(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}.mlcm"))
    }
    pub fn curve(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}_loss.csv"))
    }
}

/// gen-data, train-vae, train-diffusion, distill, train-controlnet with
/// default hyperparameters.
pub fn run_pipeline(layout: &RunLayout, seeds: &SeedSet) -> Result<Vec<StageReport>> {
    let manifest = gen_data(
        &layout.data(),
        CorpusSpec {
            seed: seeds.data,
            ..Default::default()
        },
    )?;
    let vae = train_vae_stage(
        &manifest,
        &layout.ckpt(STAGE_VAE),
        Some(&layout.curve(STAGE_VAE)),
        &VaeStageConfig {
            seed: seeds.vae,
            ..Default::default()
        },
    )?;
    let teacher = train_teacher_stage(
        &manifest,
        &vae.path,
        &layout.ckpt(STAGE_TEACHER),
        Some(&layout.curve(STAGE_TEACHER)),
        &TeacherStageConfig {
            seed: seeds.teacher,
            ..Default::default()
        },
    )?;
    let lcm = distill_stage(
        &manifest,
        &vae.path,
        &teacher.path,
        &layout.ckpt(STAGE_LCM),
        Some(&layout.curve(STAGE_LCM)),
        seeds.distill,
        &DistillConfig::default(),
    )?;
    let ctrl = controlnet_stage(
        &manifest,
        &vae.path,
        &teacher.path,
        &layout.ckpt(STAGE_CONTROLNET),
        Some(&layout.curve(STAGE_CONTROLNET)),
        seeds.controlnet,
        &ControlTrainConfig::default(),
    )?;
    Ok(vec![vae, teacher, lcm, ctrl])
}
