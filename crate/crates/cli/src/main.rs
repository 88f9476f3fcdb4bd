use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use motionlcm::attention::{bench_scaling, BenchDims, Method};
use motionlcm::checkpoint::write_atomic;
use motionlcm::consistency::DistillConfig;
use motionlcm::controlnet::ControlTrainConfig;
use motionlcm::diffusion::{DenoiserConfig, DiffusionTrainConfig};
use motionlcm::motion::{load_signal, CorpusSpec};
use motionlcm::numerics::AdamConfig;
use motionlcm::pipeline::{self, SampleRequest, TeacherStageConfig, VaeStageConfig};
use motionlcm::vae::{VaeConfig, VaeTrainConfig};
use motionlcm::Error;

/// Gated-linear-attention latent diffusion for motion: data, training
/// stages, sampling, benchmarking and evaluation.
///
/// Any subcommand accepts `--config FILE`, a `key=value` file whose lines
/// pre-seed flags; flags given on the command line win.
#[derive(Parser, Debug)]
#[command(name = "motionlcm", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the synthetic corpus and its manifest.
    GenData(GenData),
    /// Train and freeze the motion VAE.
    TrainVae(TrainVae),
    /// Train the latent diffusion teacher.
    TrainDiffusion(TrainDiffusion),
    /// Distill the teacher into a few-step consistency model.
    Distill(Distill),
    /// Train the ControlNet branch against the teacher.
    TrainControlnet(TrainControlnet),
    /// Sample motions from a teacher or distilled checkpoint.
    Sample(Sample),
    /// Time attention kernels over sequence lengths.
    Bench(Bench),
    /// Score a directory of motions.
    Eval(Eval),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    train: usize,
    #[arg(long, default_value_t = 64)]
    heldout: usize,
    #[arg(long, default_value_t = 64)]
    frames: usize,
}

#[derive(Args, Debug)]
struct Opt {
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
}

impl Opt {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct TrainVae {
    #[arg(long, default_value = "data/manifest.json")]
    corpus: PathBuf,
    #[arg(long, default_value = "vae.mlcm")]
    out: PathBuf,
    #[arg(long, default_value = "vae_loss.csv")]
    curve: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    beta_kl: f64,
    #[command(flatten)]
    opt: Opt,
}

#[derive(Args, Debug)]
struct TrainDiffusion {
    #[arg(long, default_value = "data/manifest.json")]
    corpus: PathBuf,
    #[arg(long, default_value = "vae.mlcm")]
    vae: PathBuf,
    #[arg(long, default_value = "teacher.mlcm")]
    out: PathBuf,
    #[arg(long, default_value = "teacher_loss.csv")]
    curve: PathBuf,
    #[arg(long, default_value_t = 2)]
    seed: u64,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Probability of replacing the label with the null token.
    #[arg(long, default_value_t = 0.1)]
    null_dropout: f64,
    #[arg(long, default_value_t = 100)]
    t_diff: usize,
    #[command(flatten)]
    opt: Opt,
}

#[derive(Args, Debug)]
struct Distill {
    #[arg(long, default_value = "data/manifest.json")]
    corpus: PathBuf,
    #[arg(long, default_value = "vae.mlcm")]
    vae: PathBuf,
    #[arg(long, default_value = "teacher.mlcm")]
    teacher: PathBuf,
    #[arg(long, default_value = "lcm.mlcm")]
    out: PathBuf,
    #[arg(long, default_value = "lcm_loss.csv")]
    curve: PathBuf,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Teacher solver skip in timesteps.
    #[arg(long, default_value_t = 5)]
    skip: usize,
    #[arg(long, default_value_t = 0.95)]
    ema: f64,
    /// Guidance weight baked into the distilled model.
    #[arg(long, default_value_t = 2.0)]
    w: f64,
    #[command(flatten)]
    opt: Opt,
}

#[derive(Args, Debug)]
struct TrainControlnet {
    #[arg(long, default_value = "data/manifest.json")]
    corpus: PathBuf,
    #[arg(long, default_value = "vae.mlcm")]
    vae: PathBuf,
    #[arg(long, default_value = "teacher.mlcm")]
    teacher: PathBuf,
    #[arg(long, default_value = "controlnet.mlcm")]
    out: PathBuf,
    #[arg(long, default_value = "controlnet_loss.csv")]
    curve: PathBuf,
    #[arg(long, default_value_t = 4)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Weight of the decoded-joint control term.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Every n-th frame carries a target in training signals.
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[command(flatten)]
    opt: Opt,
}

#[derive(Args, Debug)]
struct Sample {
    /// Teacher or distilled checkpoint.
    #[arg(long, default_value = "lcm.mlcm")]
    ckpt: PathBuf,
    #[arg(long, default_value = "vae.mlcm")]
    vae: PathBuf,
    #[arg(long)]
    controlnet: Option<PathBuf>,
    /// Control signal JSON; requires --controlnet.
    #[arg(long)]
    control: Option<PathBuf>,
    #[arg(long)]
    label: String,
    /// Defaults to 50 for a teacher and 4 for a distilled model.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    /// Classifier-free guidance weight (teacher only).
    #[arg(long, default_value_t = 2.0)]
    w: f64,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Bench {
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096,8192")]
    lengths: Vec<usize>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "gla_chunked,gla_recurrent,softmax_causal"
    )]
    methods: Vec<String>,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    d_head: usize,
    #[arg(long, default_value_t = 16)]
    chunk: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long, default_value = "samples")]
    samples: PathBuf,
    #[arg(long, default_value = "data/manifest.json")]
    corpus: PathBuf,
    /// Signals named like the sample files.
    #[arg(long)]
    signals: Option<PathBuf>,
    /// Metrics JSON path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Splices `key=value` lines from `--config FILE` in front of the other
/// flags of the subcommand.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, String> {
    let mut out = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config = Some(it.next().ok_or("--config needs a file")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else {
            out.push(a);
        }
    }
    let Some(path) = config else { return Ok(out) };
    let text =
        std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let mut seeded = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{path}:{}: expected key=value", n + 1))?;
        seeded.push(format!("--{}", k.trim().replace('_', "-")));
        seeded.push(v.trim().to_string());
    }
    let at = out.len().min(2);
    out.splice(at..at, seeded);
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> motionlcm::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, text.as_bytes())
}

fn report(r: &pipeline::StageReport) {
    println!("wrote {} (sha256 {})", r.path.display(), r.hash);
    println!("summary {}", r.summary);
    log::info!("stage finished in {:.1}s", r.seconds);
}

fn run(cmd: Cmd) -> motionlcm::Result<()> {
    log::info!("resolved config: {cmd:?}");
    match cmd {
        Cmd::GenData(a) => {
            let p = pipeline::gen_data(
                &a.out,
                CorpusSpec {
                    seed: a.seed,
                    train: a.train,
                    heldout: a.heldout,
                    frames: a.frames,
                },
            )?;
            println!(
                "wrote {} ({} train, {} held-out)",
                p.display(),
                a.train,
                a.heldout
            );
        }
        Cmd::TrainVae(a) => {
            let cfg = VaeStageConfig {
                seed: a.seed,
                model: VaeConfig::default(),
                train: VaeTrainConfig {
                    epochs: a.epochs,
                    batch: a.batch,
                    beta_kl: a.beta_kl,
                    adam: a.opt.adam(),
                },
            };
            report(&pipeline::train_vae_stage(
                &a.corpus,
                &a.out,
                Some(&a.curve),
                &cfg,
            )?);
        }
        Cmd::TrainDiffusion(a) => {
            let cfg = TeacherStageConfig {
                seed: a.seed,
                model: DenoiserConfig::default(),
                t_diff: a.t_diff,
                train: DiffusionTrainConfig {
                    steps: a.steps,
                    batch: a.batch,
                    null_dropout: a.null_dropout,
                    adam: a.opt.adam(),
                },
            };
            report(&pipeline::train_teacher_stage(
                &a.corpus,
                &a.vae,
                &a.out,
                Some(&a.curve),
                &cfg,
            )?);
        }
        Cmd::Distill(a) => {
            let cfg = DistillConfig {
                skip: a.skip,
                ema: a.ema,
                guidance: a.w,
                steps: a.steps,
                batch: a.batch,
                adam: a.opt.adam(),
            };
            report(&pipeline::distill_stage(
                &a.corpus,
                &a.vae,
                &a.teacher,
                &a.out,
                Some(&a.curve),
                a.seed,
                &cfg,
            )?);
        }
        Cmd::TrainControlnet(a) => {
            let cfg = ControlTrainConfig {
                steps: a.steps,
                batch: a.batch,
                lambda: a.lambda,
                stride: a.stride,
                adam: a.opt.adam(),
            };
            report(&pipeline::controlnet_stage(
                &a.corpus,
                &a.vae,
                &a.teacher,
                &a.out,
                Some(&a.curve),
                a.seed,
                &cfg,
            )?);
        }
        Cmd::Sample(a) => {
            let vae = pipeline::load_vae(&a.vae)?;
            let base = pipeline::load_denoiser(&a.ckpt, &vae)?;
            let ctrl = match &a.controlnet {
                Some(p) => Some(pipeline::load_controlnet(p, &base, &vae)?),
                None => None,
            };
            let control = a.control.as_deref().map(load_signal).transpose()?;
            let steps = a.steps.unwrap_or(if base.distilled_guidance.is_some() {
                4
            } else {
                50
            });
            let req = SampleRequest {
                label: a.label,
                steps,
                count: a.count,
                seed: a.seed,
                guidance: a.w,
                control,
            };
            let (motions, records) = pipeline::sample_stage(&base, &vae, ctrl.as_ref(), &req)?;
            pipeline::write_samples(&a.out, &motions, &records)?;
            print!("{}", pipeline::timing_csv(&records));
        }
        Cmd::Bench(a) => {
            let methods = a
                .methods
                .iter()
                .map(|m| Method::parse(m))
                .collect::<motionlcm::Result<Vec<_>>>()?;
            let dims = BenchDims {
                heads: a.heads,
                d_k: a.d_head,
                d_v: a.d_head,
                chunk: a.chunk,
            };
            let rep = bench_scaling(&methods, &a.lengths, dims, a.reps)?;
            write_file(&a.out, &rep.to_csv())?;
            for (m, s) in &rep.slopes {
                println!("slope {m} {s:.3}");
            }
        }
        Cmd::Eval(a) => {
            let m = pipeline::eval_stage(&a.samples, &a.corpus, a.signals.as_deref())?;
            let text = serde_json::to_string_pretty(&m)?;
            match &a.out {
                Some(p) => write_file(p, &format!("{text}\n"))?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
