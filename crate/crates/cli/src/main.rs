use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sdpt::io::checkpoint::Checkpoint;
use sdpt::io::dataset::{read_clip, read_depth_dir, read_flow_dir, read_frames_dir, write_clip, write_depth_dir, write_meta, DepthConvention, Meta};
use sdpt::io::{read_file, write_file, xtslice};
use sdpt::losses::{Granularity, Target};
use sdpt::metrics::{evaluate, MetricOptions};
use sdpt::model::{Model, ModelConfig};
use sdpt::scheduler::{account, execute_parallel, plan, KeyframePolicy, PlanConfig, Strategy};
use sdpt::synth::{render, suite_scene, SuiteConfig, SUITE_NAMES};
use sdpt::trainer::{TrainClip, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "sdpt", version, about = "Temporally stable video depth: train, infer, plan, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict depth for every frame of a clip.
    Infer(InferArgs),
    /// Train a model on rendered or on-disk clips.
    Train(TrainArgs),
    /// Score predicted depth against ground truth.
    Eval(EvalArgs),
    /// Print the snippet schedule and its cost without running a model.
    Plan(PlanArgs),
    /// Stack one pixel row of every depth map into an image.
    Xtslice(XtsliceArgs),
    /// Render the synthetic benchmark suite to disk.
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Batched,
    Overlap,
    Strided,
    #[value(alias = "strided_kf")]
    StridedKf,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Batched => Strategy::Batched,
            StrategyArg::Overlap => Strategy::Overlap,
            StrategyArg::Strided => Strategy::Strided,
            StrategyArg::StridedKf => Strategy::StridedKf,
        }
    }
}

#[derive(clap::Args)]
struct ScheduleArgs {
    #[arg(long, value_enum, default_value = "strided-kf")]
    strategy: StrategyArg,
    /// Snippet length L_s.
    #[arg(long, default_value_t = 16)]
    window: usize,
    /// Frames shared by consecutive windows (overlap strategy only).
    #[arg(long, default_value_t = 2)]
    overlap: usize,
    /// Keyframe count M (strided-kf only).
    #[arg(long, default_value_t = 4)]
    keyframes: usize,
}

impl ScheduleArgs {
    fn config(&self) -> PlanConfig {
        PlanConfig {
            overlap: self.overlap,
            keyframes: KeyframePolicy {
                count: self.keyframes,
                ..KeyframePolicy::default()
            },
            ..PlanConfig::new(self.strategy.into(), self.window)
        }
    }
}

#[derive(clap::Args)]
struct InferArgs {
    /// Clip directory (with frames/) or a directory of NNNNNN.ppm frames.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Worker threads for snippet evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSON with optional "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// A clip directory or a directory of clip directories.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the batch seed and the model initialisation seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Sequence,
    Frame,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Directory of predicted inverse-depth PFMs, or an infer output directory.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth clip directory, or a directory of PFMs.
    #[arg(long)]
    gt: PathBuf,
    /// Forward flow (NNNNNN.flo5); defaults to the ground-truth clip's flow/ if present.
    #[arg(long)]
    flow: Option<PathBuf>,
    /// RGB frames for the temporal gradient metric; defaults to the ground-truth clip's frames/.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "model")]
    method: String,
    #[arg(long, value_enum, default_value = "sequence")]
    align: AlignArg,
}

#[derive(clap::Args)]
struct PlanArgs {
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Video length N.
    #[arg(long)]
    frames: usize,
}

#[derive(clap::Args)]
struct XtsliceArgs {
    /// Directory of depth PFMs, or a directory holding depth/.
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    row: usize,
    /// Output PGM image.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RenderArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Comma-separated subset of the suite (default: all clips).
    #[arg(long, value_delimiter = ',')]
    clips: Vec<String>,
    #[arg(long, default_value_t = 24.0)]
    fps: f64,
}

/// Bad flag combinations found after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    /// Seed for fresh model parameters.
    init_seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::Infer(a) => infer(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Xtslice(a) => xtslice_cmd(a),
        Command::Render(a) => render_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined by ": ", skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if parts.last().is_some_and(|p| p.ends_with(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ")
}

/// Prints to stdout; a closed pipe (`sdpt plan | head`) is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<UsageError>()) {
        return 1;
    }
    match e.chain().find_map(|c| c.downcast_ref::<sdpt::Error>()) {
        Some(sdpt::Error::Config(_)) => 1,
        Some(sdpt::Error::NonFinite(_) | sdpt::Error::Degenerate(_)) => 3,
        _ => 2,
    }
}

fn is_clip_dir(dir: &Path) -> bool {
    dir.join("meta.json").is_file()
}

/// `dir/sub` when it exists, otherwise `dir`.
fn series_dir(dir: &Path, sub: &str) -> PathBuf {
    let nested = dir.join(sub);
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn infer(a: InferArgs) -> Result<()> {
    let (frames, fps) = if is_clip_dir(&a.input) {
        let meta = Meta::from_json(&read_file(&a.input.join("meta.json"))?)?;
        (read_frames_dir(&a.input.join("frames"))?, meta.fps)
    } else {
        (read_frames_dir(&series_dir(&a.input, "frames"))?, 24.0)
    };
    let ckpt = Checkpoint::load(&a.checkpoint).context("loading checkpoint")?;
    let model = Model::from_parts(ckpt.config, ckpt.params)?;
    let [n, _, h, w] = frames.dims4("frames")?;
    let p = plan(&a.schedule.config(), n)?;
    log::info!("{} frames, {} snippets, {} strategy", n, p.snippets.len(), p.strategy.name());
    let depth = execute_parallel(&p, &frames, &model, a.threads.max(1))?;
    write_depth_dir(&a.out.join("depth"), &depth)?;
    write_file(&a.out.join("plan.json"), p.to_json()?.as_bytes())?;
    write_file(&a.out.join("cost.json"), &serde_json::to_vec_pretty(&account(&p))?)?;
    write_meta(&a.out, &Meta { n, h, w, fps, depth_convention: DepthConvention::InverseDepth })?;
    println!("wrote {n} depth maps to {}", a.out.join("depth").display());
    Ok(())
}

fn load_training_clips(data: &Path) -> Result<Vec<TrainClip>> {
    let dirs: Vec<PathBuf> = if is_clip_dir(data) {
        vec![data.to_path_buf()]
    } else {
        let mut v: Vec<PathBuf> = std::fs::read_dir(data)
            .with_context(|| format!("reading {}", data.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_clip_dir(p))
            .collect();
        v.sort();
        v
    };
    if dirs.is_empty() {
        bail!(UsageError(format!("{} holds no clip directories (none has a meta.json)", data.display())));
    }
    dirs.iter()
        .map(|d| {
            let ds = read_clip(d)?;
            let gt = ds
                .disparity
                .with_context(|| format!("{}: training clips need a depth/ folder", d.display()))?;
            Ok(TrainClip {
                name: d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                frames: ds.frames,
                target: Target::dense(&gt)?,
            })
        })
        .collect()
}

/// Head input widths follow the encoder unless the config spells them out.
fn parse_run_config(bytes: &[u8]) -> serde_json::Result<RunConfig> {
    let raw: serde_json::Value = serde_json::from_slice(bytes)?;
    let explicit = raw.pointer("/model/head/feature_dims").is_some();
    let mut cfg: RunConfig = serde_json::from_value(raw)?;
    if !explicit {
        cfg.model.head.feature_dims = [cfg.model.encoder.embed_dim; sdpt::encoder::NUM_TAPS];
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => parse_run_config(&read_file(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.init_seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let clips = load_training_clips(&a.data)?;
    log::info!("training on {} clips for {} steps", clips.len(), cfg.train.steps);
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).context("loading checkpoint")?;
            Trainer::resume(cfg.train.clone(), ck, clips)?
        }
        None => Trainer::new(cfg.train.clone(), Model::new(cfg.model.clone(), cfg.init_seed)?, clips)?,
    };
    write_file(&a.out.join("config.json"), &serde_json::to_vec_pretty(&cfg)?)?;
    trainer.run(Some(&a.out))?;
    if let Some(last) = trainer.state.history.last() {
        println!("step {}: loss {:.6}", last.step + 1, last.total);
    }
    println!("wrote {}", a.out.join("final.sdpt").display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = read_depth_dir(&series_dir(&a.pred, "depth"))?;
    let (gt, clip_frames, clip_flow) = if is_clip_dir(&a.gt) {
        let ds = read_clip(&a.gt)?;
        let gt = ds.disparity.with_context(|| format!("{} has no depth/ folder", a.gt.display()))?;
        (gt, Some(ds.frames), ds.flow)
    } else {
        (read_depth_dir(&a.gt)?, None, None)
    };
    let frames = match &a.frames {
        Some(d) => Some(read_frames_dir(d)?),
        None => clip_frames,
    };
    let flow = match &a.flow {
        Some(d) => Some(read_flow_dir(d)?),
        None => clip_flow,
    };
    if pred.shape() != gt.shape() {
        bail!(sdpt::Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    let opts = MetricOptions {
        alignment: Some(match a.align {
            AlignArg::Sequence => Granularity::PerSequence,
            AlignArg::Frame => Granularity::PerFrame,
        }),
        ..MetricOptions::default()
    };
    let report = evaluate(&a.method, &pred, &Target::dense(&gt)?, frames.as_ref(), flow.as_ref(), &opts)?;
    write_file(&a.report, report.to_json()?.as_bytes())?;
    for (name, m) in &report.metrics {
        match (m.value, &m.note) {
            (Some(v), _) => println!("{name:>7} {v:.6}"),
            (None, Some(note)) => println!("{name:>7} {note}"),
            (None, None) => println!("{name:>7} -"),
        }
    }
    Ok(())
}

fn plan_cmd(a: PlanArgs) -> Result<()> {
    let p = plan(&a.schedule.config(), a.frames)?;
    let out = serde_json::json!({ "plan": p, "cost": account(&p) });
    emit(&serde_json::to_string_pretty(&out)?)
}

fn xtslice_cmd(a: XtsliceArgs) -> Result<()> {
    let maps = read_depth_dir(&series_dir(&a.depth, "depth"))?;
    write_file(&a.out, &xtslice::render_pgm(&maps, a.row)?)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let names: Vec<String> = if a.clips.is_empty() {
        SUITE_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        a.clips.clone()
    };
    let cfg = SuiteConfig { height: a.height, width: a.width, frames: a.frames };
    for name in &names {
        let clip = render(&suite_scene(name, a.seed, &cfg)?, name)?;
        write_clip(&a.out.join(name), &clip, a.fps)?;
    }
    println!("rendered {} clips to {}", names.len(), a.out.display());
    Ok(())
}
