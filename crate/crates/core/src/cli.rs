//! Command-line surface: `synth`, `init`, `stream`, `render` and `eval`.
//!
//! Every command prints its resolved configuration as one JSON line before
//! doing any work. Exit codes are 0 on success, 1 on runtime failure and 2 on
//! usage errors (bad flags, invalid spec or config fields).

use std::ffi::OsString;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::loss::psnr;
use crate::math::Vec3;
use crate::pipeline::{stream_parallel, stream_sequential, LearnedFrame, SceneStream, StreamContext, StreamOutcome, StreamWriter};
use crate::raster::render;
use crate::storage::codec::{decode_checkpoint, encode_checkpoint};
use crate::storage::dataset::{write_png, Dataset};
use crate::storage::synthetic::{generate_synthetic, SceneSpec};
use crate::train::train_initial;
use crate::Camera;

#[derive(Debug, Parser)]
#[command(name = "splatstream", version, about = "Streamable dynamic Gaussian splatting")]
pub struct Cli {
    /// Worker threads for rendering and parallel frames (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view dataset from a scene spec.
    Synth(SynthArgs),
    /// Train the frame-0 cloud and write a checkpoint.
    Init(InitArgs),
    /// Learn every later frame and write a replayable stream.
    Stream(StreamArgs),
    /// Replay a stream and render one camera per frame to PNG.
    Render(RenderArgs),
    /// Replay a stream and report test-view PSNR per frame.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec JSON; omitted fields take defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output `.hckpt` path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Frame-0 `.hckpt` written by `init`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output stream directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub stream: PathBuf,
    /// Dataset supplying the cameras.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `N`, `A..B`, `A..=B` or `A..`; all frames by default.
    #[arg(long, value_parser = parse_frames)]
    pub frames: Option<FrameRange>,
    /// Camera index; the test camera by default.
    #[arg(long)]
    pub camera: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = parse_frames)]
    pub frames: Option<FrameRange>,
    /// Optional CSV output (`frame,psnr_db`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Overrides for [`TrainConfig`]; one flag per field.
#[derive(Debug, Default, Clone, Args)]
pub struct TrainFlags {
    /// Base configuration JSON; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initial training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub motion_steps: Option<usize>,
    #[arg(long)]
    pub refine_steps: Option<usize>,
    #[arg(long)]
    pub lambda_noise: Option<f64>,
    #[arg(long)]
    pub lambda_dssim: Option<f64>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub gaussians_per_region: Option<usize>,
    #[arg(long)]
    pub warm_start: Option<f64>,
    #[arg(long)]
    pub grad_threshold: Option<f64>,
    /// Frames learned concurrently from one reference.
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long)]
    pub split_stop_step: Option<usize>,
    #[arg(long)]
    pub densify_start_step: Option<usize>,
    #[arg(long)]
    pub init_densify_interval: Option<usize>,
    #[arg(long)]
    pub refine_densify_interval: Option<usize>,
    #[arg(long)]
    pub prune_opacity_threshold: Option<f64>,
    #[arg(long)]
    pub small_gaussian_fraction: Option<f64>,
    #[arg(long)]
    pub split_scale_divisor: Option<f64>,
    #[arg(long)]
    pub clone_cap_fraction: Option<f64>,
    #[arg(long)]
    pub lr_position: Option<f64>,
    #[arg(long)]
    pub lr_sh: Option<f64>,
    #[arg(long)]
    pub lr_opacity: Option<f64>,
    #[arg(long)]
    pub lr_log_scale: Option<f64>,
    #[arg(long)]
    pub lr_rotation: Option<f64>,
    #[arg(long)]
    pub lr_motion_translation: Option<f64>,
    #[arg(long)]
    pub lr_motion_rotation: Option<f64>,
    #[arg(long)]
    pub lr_final_ratio: Option<f64>,
    #[arg(long)]
    pub outlier_quantile: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// `r,g,b` in [0, 1].
    #[arg(long, value_parser = parse_rgb)]
    pub background: Option<[f64; 3]>,
    /// Keep motion at identity (ablation).
    #[arg(long)]
    pub no_motion: bool,
    /// Skip per-frame refinement (ablation).
    #[arg(long)]
    pub no_refine: bool,
}

impl TrainFlags {
    /// Defaults, then the `--config` file, then individual flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_slice(&read(p)?)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set! {
            seed => seed,
            steps => init_steps,
            motion_steps => motion_steps,
            refine_steps => refine_steps,
            lambda_noise => lambda_noise,
            lambda_dssim => lambda_dssim,
            levels => motion_levels,
            gaussians_per_region => max_gaussians_per_region,
            warm_start => warm_start_factor,
            grad_threshold => grad_clone_threshold,
            parallel => parallel_frames,
            split_stop_step => split_stop_step,
            densify_start_step => densify_start_step,
            init_densify_interval => init_densify_interval,
            refine_densify_interval => refine_densify_interval,
            prune_opacity_threshold => prune_opacity_threshold,
            small_gaussian_fraction => small_gaussian_fraction,
            split_scale_divisor => split_scale_divisor,
            clone_cap_fraction => clone_cap_fraction,
            lr_position => lr.position,
            lr_sh => lr.sh,
            lr_opacity => lr.opacity,
            lr_log_scale => lr.log_scale,
            lr_rotation => lr.rotation,
            lr_motion_translation => lr.motion_translation,
            lr_motion_rotation => lr.motion_rotation,
            lr_final_ratio => lr.final_ratio,
            outlier_quantile => outlier_quantile,
            beta1 => beta1,
            beta2 => beta2,
            eps => eps,
        }
        if let Some(bg) = self.background {
            c.background = bg;
        }
        if self.no_motion {
            c.motion_enabled = false;
        }
        if self.no_refine {
            c.refine_enabled = false;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Half-open frame interval; `end` is `None` for "to the last frame".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRange {
    pub start: usize,
    pub end: Option<usize>,
}

impl FrameRange {
    pub fn resolve(&self, frame_count: usize) -> Result<Range<usize>> {
        let end = self.end.unwrap_or(frame_count);
        if self.start >= end || end > frame_count {
            return Err(Error::InvalidArgument(format!(
                "frame range {}..{end} outside 0..{frame_count}",
                self.start
            )));
        }
        Ok(self.start..end)
    }
}

fn parse_frames(s: &str) -> std::result::Result<FrameRange, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad frame number {t:?}: {e}"));
    if let Some((a, b)) = s.split_once("..=") {
        return Ok(FrameRange {
            start: num(a)?,
            end: Some(num(b)? + 1),
        });
    }
    if let Some((a, b)) = s.split_once("..") {
        let end = if b.trim().is_empty() { None } else { Some(num(b)?) };
        return Ok(FrameRange { start: num(a)?, end });
    }
    let n = num(s)?;
    Ok(FrameRange {
        start: n,
        end: Some(n + 1),
    })
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad component {t:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected 3 components, got {}", v.len()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

fn echo<T: Serialize>(command: &str, value: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a, T> {
        command: &'a str,
        #[serde(flatten)]
        value: &'a T,
    }
    println!("{}", serde_json::to_string(&Line { command, value })?);
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct SynthSummary {
    pub frames: usize,
    pub cameras: usize,
    pub blobs: usize,
}

pub fn cmd_synth(spec: Option<&Path>, out: &Path, seed: u64) -> Result<SynthSummary> {
    let spec: SceneSpec = match spec {
        Some(p) => serde_json::from_slice(&read(p)?)?,
        None => SceneSpec::default(),
    };
    echo("synth", &serde_json::json!({ "seed": seed, "out": out, "spec": spec }))?;
    let ds = generate_synthetic(&spec, seed, out)?;
    let s = SynthSummary {
        frames: ds.frame_count(),
        cameras: ds.cameras.len(),
        blobs: ds.blobs.len(),
    };
    println!(
        "synth: wrote {} frames x {} cameras ({} blobs) to {}",
        s.frames,
        s.cameras,
        s.blobs,
        out.display()
    );
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct InitSummary {
    pub cloud: GaussianCloud,
    pub psnr_test: f64,
    pub seconds: f64,
}

pub fn cmd_init(dataset: &Path, out: &Path, cfg: &TrainConfig) -> Result<InitSummary> {
    echo("init", &serde_json::json!({ "dataset": dataset, "out": out, "config": cfg }))?;
    let ds = Dataset::open(dataset)?;
    let seeds = ds.seed_points()?;
    let frame = ds.load_frame(0)?;
    let start = Instant::now();
    let cloud = train_initial(&frame.train, &seeds, cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, encode_checkpoint(&cloud))?;
    let psnr_test = psnr(&render(&cloud, &frame.test.0, &Vec3::from(cfg.background)), &frame.test.1)?;
    println!(
        "init: psnr {psnr_test:.3} dB, {} gaussians, {seconds:.2} s -> {}",
        cloud.len(),
        out.display()
    );
    Ok(InitSummary {
        cloud,
        psnr_test,
        seconds,
    })
}

pub fn cmd_stream(dataset: &Path, checkpoint: &Path, out: &Path, cfg: &TrainConfig) -> Result<StreamOutcome> {
    echo(
        "stream",
        &serde_json::json!({ "dataset": dataset, "checkpoint": checkpoint, "out": out, "config": cfg }),
    )?;
    let ds = Dataset::open(dataset)?;
    let initial = decode_checkpoint(&read(checkpoint)?)?;
    let cams: Vec<&Camera> = ds.cameras.iter().collect();
    let ctx = StreamContext::new(&initial, &cams, cfg)?;
    let mut writer = StreamWriter::create(out, cfg, &initial)?;
    let k = cfg.parallel_frames;
    let frames = ds.frames(1, k);
    let mut sink = |l: &LearnedFrame| {
        let r = &l.result;
        println!(
            "frame {}: psnr {:.3} dB, {} bytes, {:.2} s",
            r.frame_index, r.psnr_test, r.delta_bytes, r.train_wall_seconds
        );
        writer.write_frame(r)
    };
    let outcome = if k == 1 {
        stream_sequential(&initial, frames, &ctx, cfg, &mut sink)?
    } else {
        stream_parallel(&initial, frames, k, &ctx, cfg, &mut sink)?
    };
    println!(
        "stream: {} frames, mean psnr {:.3} dB, {:.2} s/frame -> {}",
        outcome.results.len(),
        outcome.mean_psnr(),
        outcome.seconds_per_frame(),
        out.display()
    );
    Ok(outcome)
}

fn replay_range(stream: &Path, frames: Option<FrameRange>) -> Result<(SceneStream, Vec<crate::pipeline::ReplayedFrame>, Range<usize>)> {
    let s = SceneStream::read(stream)?;
    let range = frames
        .unwrap_or(FrameRange { start: 0, end: None })
        .resolve(s.frame_count())?;
    let replayed = s.replay()?;
    Ok((s, replayed, range))
}

pub fn cmd_render(
    stream: &Path,
    dataset: &Path,
    out: &Path,
    frames: Option<FrameRange>,
    camera: Option<usize>,
) -> Result<Vec<PathBuf>> {
    echo(
        "render",
        &serde_json::json!({ "stream": stream, "dataset": dataset, "out": out,
            "frames": frames.map(|f| (f.start, f.end)), "camera": camera }),
    )?;
    let ds = Dataset::open(dataset)?;
    let ci = camera.unwrap_or(ds.test_camera_index);
    let cam = ds
        .cameras
        .get(ci)
        .ok_or_else(|| Error::InvalidArgument(format!("camera {ci} out of range for {} cameras", ds.cameras.len())))?;
    let (s, replayed, range) = replay_range(stream, frames)?;
    let bg = Vec3::from(s.config.background);
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for f in &replayed[range] {
        let path = out.join(format!("frame_{:06}.png", f.index));
        write_png(&path, &render(&f.current, cam, &bg))?;
        written.push(path);
    }
    println!("render: wrote {} images to {}", written.len(), out.display());
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct EvalTable {
    pub rows: Vec<(usize, f64)>,
    pub mean_psnr: f64,
}

pub fn cmd_eval(stream: &Path, dataset: &Path, frames: Option<FrameRange>, out: Option<&Path>) -> Result<EvalTable> {
    echo(
        "eval",
        &serde_json::json!({ "stream": stream, "dataset": dataset, "out": out,
            "frames": frames.map(|f| (f.start, f.end)) }),
    )?;
    let ds = Dataset::open(dataset)?;
    let (s, replayed, range) = replay_range(stream, frames)?;
    if s.frame_count() > ds.frame_count {
        return Err(Error::InvalidArgument(format!(
            "stream has {} frames but dataset only {}",
            s.frame_count(),
            ds.frame_count
        )));
    }
    let bg = Vec3::from(s.config.background);
    let mut rows = Vec::new();
    for f in &replayed[range] {
        let data = ds.load_frame(f.index)?;
        let p = psnr(&render(&f.current, &data.test.0, &bg), &data.test.1)?;
        println!("{},{p}", f.index);
        rows.push((f.index, p));
    }
    let mean_psnr = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    println!("eval: mean psnr {mean_psnr:.4} dB over {} frames", rows.len());
    if let Some(p) = out {
        let mut csv = String::from("frame,psnr_db\n");
        for (i, v) in &rows {
            csv.push_str(&format!("{i},{v}\n"));
        }
        std::fs::write(p, csv)?;
    }
    Ok(EvalTable { rows, mean_psnr })
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidSpec { .. } | Error::Json(_) => 2,
        Error::Frame { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidSpec {
                field: "threads".into(),
                reason: "must be >= 1".into(),
            });
        }
        // fails only if a pool already exists, e.g. when called twice in-process
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a.spec.as_deref(), &a.out, a.seed).map(drop),
        Command::Init(a) => cmd_init(&a.dataset, &a.out, &a.train.resolve()?).map(drop),
        Command::Stream(a) => cmd_stream(&a.dataset, &a.checkpoint, &a.out, &a.train.resolve()?).map(drop),
        Command::Render(a) => cmd_render(&a.stream, &a.dataset, &a.out, a.frames, a.camera).map(drop),
        Command::Eval(a) => cmd_eval(&a.stream, &a.dataset, a.frames, a.out.as_deref()).map(drop),
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            exit_code(&e)
        }
    }
}
