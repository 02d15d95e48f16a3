//! Command-line entry points. Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use toonbetween_core::metrics::{l1, psnr, ssim};
use toonbetween_core::{io, Frame};
use toonbetween_model::{checkpoint, Model, ModelConfig};
use toonbetween_train::data::{self, prepare_dataset, read_frame_dir, NetworkFlow, PrepareOptions, Thresholds, ZeroFlow};
use toonbetween_train::synth::{MotionKind, SceneOptions, SpriteScene};
use toonbetween_train::train::{load_stage1, load_stage2, train_stage1, train_stage2, RunOptions};
use toonbetween_train::TrainConfig;

use crate::service::{self, AppState, ServiceConfig};

pub const MODEL_ENV: &str = "TOONBETWEEN_MODEL";

#[derive(Debug, Parser)]
#[command(name = "toonbetween", version, about = "Sketch-guided cartoon inbetweening")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prune, split and filter frame sequences into a training dataset.
    PrepareData(PrepareArgs),
    /// Run stage-1 and/or stage-2 training.
    Train(TrainArgs),
    /// Synthesize the frame at the sketch time.
    Synthesize(SynthesizeArgs),
    /// Synthesize a sequence of inbetweens.
    Interpolate(InterpolateArgs),
    /// Compare predicted frames with ground truth (PSNR, SSIM, ℓ1).
    Evaluate(EvaluateArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

fn unit_time(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1)"))
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArg {
    /// Checkpoint path; falls back to the TOONBETWEEN_MODEL environment variable.
    #[arg(long, env = MODEL_ENV)]
    pub model: Option<PathBuf>,
}

impl ModelArg {
    fn load(&self) -> anyhow::Result<(Model, String)> {
        let path = self.model.as_ref().with_context(|| format!("no model: pass --model or set {MODEL_ENV}"))?;
        load_model(path)
    }
}

/// Loads a checkpoint and derives its version string from the file content.
pub fn load_model(path: &Path) -> anyhow::Result<(Model, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let model = checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok((model, model_version(&bytes)))
}

pub fn model_version(checkpoint_bytes: &[u8]) -> String {
    let d = Sha256::digest(checkpoint_bytes);
    let short: String = d.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("{}+{short}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FlowSource {
    /// Matching rate from unwarped neighbours.
    Zero,
    /// The correspondence network of `--model` in frame-to-frame mode.
    Network,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directories of PNG frames; each is one source sequence.
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    /// Also generate this many synthetic sprite clips.
    #[arg(long, default_value_t = 0)]
    pub synthetic: usize,
    #[arg(long, default_value_t = 9)]
    pub synthetic_frames: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 160)]
    pub width: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.95)]
    pub prune_ssim: f64,
    #[arg(long, default_value_t = 0.35)]
    pub scene_cut_ssim: f64,
    #[arg(long, default_value_t = 0.05)]
    pub match_error: f64,
    #[arg(long, default_value_t = 0.65)]
    pub match_rate: f64,
    #[arg(long, value_enum, default_value_t = FlowSource::Zero)]
    pub flow: FlowSource,
    #[command(flatten)]
    pub model: ModelArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML training config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Stage::Both)]
    pub stage: Stage,
    /// Start from this checkpoint (required for `--stage 2`).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub temporal: Option<Toggle>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub i0: PathBuf,
    #[arg(long)]
    pub i1: PathBuf,
    #[arg(long)]
    pub sketch: PathBuf,
    #[arg(long, value_parser = unit_time)]
    pub t: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write flows (.flo) and masks (PNG).
    #[arg(long)]
    pub debug: bool,
    #[command(flatten)]
    pub model: ModelArg,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub i0: PathBuf,
    #[arg(long)]
    pub i1: PathBuf,
    #[arg(long)]
    pub sketch: PathBuf,
    #[arg(long, value_parser = unit_time)]
    pub t: f64,
    /// Evenly spaced inbetweens `i / (frames + 1)`.
    #[arg(long, conflicts_with = "times")]
    pub frames: Option<usize>,
    /// Explicit sorted times in (0, 1).
    #[arg(long, value_delimiter = ',', value_parser = unit_time)]
    pub times: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub temporal: Toggle,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted PNG frames.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth PNG frames with the same file names.
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = 32 << 20)]
    pub max_body_bytes: usize,
    #[arg(long, default_value_t = 300)]
    pub timeout_secs: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::PrepareData(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Evaluate(a) => {
            println!("{}", serde_json::to_string(&evaluate_dirs(&a.pred, &a.gt)?)?);
            Ok(())
        }
        Command::Serve(a) => serve(a),
    }
}

fn prepare(a: PrepareArgs) -> anyhow::Result<()> {
    let mut sources = Vec::new();
    for dir in &a.inputs {
        sources.push(read_frame_dir(dir).with_context(|| format!("reading frames from {}", dir.display()))?);
    }
    if a.synthetic > 0 {
        let opts = SceneOptions { kind: MotionKind::Affine, ..SceneOptions::new(a.height, a.width) };
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        for _ in 0..a.synthetic {
            sources.push(SpriteScene::random(&opts, &mut rng).clip(a.synthetic_frames.max(3)));
        }
    }
    if sources.is_empty() {
        bail!("nothing to prepare: pass --input or --synthetic");
    }
    let opts = PrepareOptions {
        seed: a.seed,
        thresholds: Thresholds {
            prune_ssim: a.prune_ssim,
            scene_cut_ssim: a.scene_cut_ssim,
            match_error: a.match_error,
            match_rate: a.match_rate,
            ..Thresholds::default()
        },
        ..PrepareOptions::default()
    };
    let manifest = match a.flow {
        FlowSource::Zero => prepare_dataset(&sources, &a.out, &opts, &ZeroFlow)?,
        FlowSource::Network => {
            let (model, _) = a.model.load()?;
            let provider = NetworkFlow { net: &model.net.correspondence, params: &model.params };
            prepare_dataset(&sources, &a.out, &opts, &provider)?
        }
    };
    eprintln!(
        "{} scenes, {} stage-1 triples ({} rejected), {} stage-2 windows",
        manifest.scenes.len(),
        manifest.stage1.len(),
        manifest.rejected.len(),
        manifest.stage2.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(t) = a.temporal {
        cfg.temporal = t.on();
    }
    let manifest = data::Manifest::read(&a.data)?;
    let mut model = match &a.resume {
        Some(p) => load_model(p)?.0,
        None if a.stage == Stage::Two => bail!("--stage 2 needs --resume with a stage-1 checkpoint"),
        None => Model::new(cfg.model.clone(), cfg.seed),
    };
    let mut stderr = std::io::stderr();
    if matches!(a.stage, Stage::One | Stage::Both) {
        let samples = load_stage1(&a.data, &manifest)?;
        let mut opts = RunOptions { out_dir: Some(a.out.clone()), log: Some(&mut stderr), target_psnr: None };
        let r = train_stage1(&mut model, &samples, &[], &cfg, &mut opts)?;
        eprintln!("stage 1: {} steps, final validation PSNR {:.3}", r.steps(), r.validation.last().map_or(f64::NAN, |v| v.1));
    }
    if matches!(a.stage, Stage::Two | Stage::Both) {
        let samples = load_stage2(&a.data, &manifest)?;
        let mut opts = RunOptions { out_dir: Some(a.out.clone()), log: Some(&mut stderr), target_psnr: None };
        let r = train_stage2(&mut model, &samples, &[], &cfg, &mut opts)?;
        eprintln!("stage 2: {} steps, final validation PSNR {:.3}", r.steps(), r.validation.last().map_or(f64::NAN, |v| v.1));
    }
    Ok(())
}

fn read_inputs(i0: &Path, i1: &Path, sketch: &Path) -> anyhow::Result<(Frame, Frame, toonbetween_core::Sketch)> {
    Ok((
        io::read_frame(i0).with_context(|| format!("reading {}", i0.display()))?,
        io::read_frame(i1).with_context(|| format!("reading {}", i1.display()))?,
        io::read_sketch(sketch).with_context(|| format!("reading {}", sketch.display()))?,
    ))
}

fn synthesize(a: SynthesizeArgs) -> anyhow::Result<()> {
    let (i0, i1, sk) = read_inputs(&a.i0, &a.i1, &a.sketch)?;
    let (model, _) = a.model.load()?;
    let out = model.synthesize_middle(&sk, &i0, &i1)?;
    std::fs::create_dir_all(&a.out)?;
    io::write_frame(a.out.join("frame_t.png"), &out.frame)?;
    if a.debug {
        let f = &out.flows;
        for (name, flow) in [("f_t0", &f.f_t0), ("f_0t", &f.f_0t), ("f_t1", &f.f_t1), ("f_1t", &f.f_1t)] {
            io::write_flo(a.out.join(format!("{name}.flo")), flow)?;
        }
        io::write_gray(a.out.join("occlusion_t0.png"), out.occlusion.0.grid())?;
        io::write_gray(a.out.join("occlusion_t1.png"), out.occlusion.1.grid())?;
        io::write_gray(a.out.join("blend_mask.png"), out.blend_mask.grid())?;
    }
    Ok(())
}

fn interpolate(a: InterpolateArgs) -> anyhow::Result<()> {
    let times: Vec<f64> = match a.frames {
        Some(n) => (1..=n).map(|i| i as f64 / (n + 1) as f64).collect(),
        None if a.times.is_empty() => bail!("pass --frames or --times"),
        None => a.times.clone(),
    };
    let (i0, i1, sk) = read_inputs(&a.i0, &a.i1, &a.sketch)?;
    let (model, _) = a.model.load()?;
    let frames = model.interpolate_sequence(&i0, &i1, &sk, a.t, &times, a.temporal.on())?;
    std::fs::create_dir_all(&a.out)?;
    for (i, f) in frames.iter().enumerate() {
        io::write_frame(a.out.join(format!("frame_{:03}.png", i + 1)), f)?;
    }
    Ok(())
}

/// Mean metrics over frames present in both directories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub frames: usize,
}

pub fn evaluate_dirs(pred: &Path, gt: &Path) -> anyhow::Result<Evaluation> {
    let mut names: Vec<String> = std::fs::read_dir(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    let (mut p, mut s, mut l, mut n) = (0.0, 0.0, 0.0, 0usize);
    for name in names {
        let g = gt.join(&name);
        if !g.exists() {
            continue;
        }
        let a = io::read_frame(pred.join(&name))?;
        let b = io::read_frame(&g)?;
        if a.dims() != b.dims() {
            bail!("{name}: sizes differ ({:?} vs {:?})", a.dims(), b.dims());
        }
        p += psnr(&a, &b);
        s += ssim(&a, &b);
        l += l1(&a, &b);
        n += 1;
    }
    if n == 0 {
        bail!("no frames with matching names in {} and {}", pred.display(), gt.display());
    }
    let k = n as f64;
    Ok(Evaluation { psnr: p / k, ssim: s / k, l1: l / k, frames: n })
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let (model, version) = match &a.model.model {
        Some(_) => {
            let (m, v) = a.model.load()?;
            (Some(m), v)
        }
        None => {
            eprintln!("warning: no model configured; /synthesize will answer 503");
            (None, "none".to_string())
        }
    };
    let cfg = ServiceConfig { max_body_bytes: a.max_body_bytes, timeout: Duration::from_secs(a.timeout_secs), workers: a.workers };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    eprintln!("listening on {}", a.addr);
    rt.block_on(service::serve(AppState::new(model, version, cfg), a.addr))?;
    Ok(())
}

/// Writes a randomly initialized checkpoint; handy for smoke tests.
pub fn write_untrained_checkpoint(path: &Path, config: ModelConfig, seed: u64) -> anyhow::Result<()> {
    checkpoint::save(&Model::new(config, seed), path)?;
    Ok(())
}
