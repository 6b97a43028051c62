//! Frame-by-frame online reconstruction.
//!
//! Each new frame starts from a reference cloud: region motion is fitted and
//! committed, Gaussians where motion left large errors are cloned and refined,
//! and the merged cloud is trimmed back to its original size. The per-frame
//! change is recorded as a [`FrameDelta`], and [`commit_frame`] is the only
//! code path that turns a reference plus a delta into the next state, for
//! learning and replay alike.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gaussian::{compute_bounds, GaussianCloud, SceneBounds};
use crate::loss::psnr;
use crate::math::Vec3;
use crate::motion::{apply_motion, compose_motion, level_edges, optimize_motion, warm_start, MotionField};
use crate::raster::render;
use crate::refine::{merge_and_rebalance, refine_new_gaussians, select_clone_candidates, RefineReport};
use crate::storage::codec::{decode_checkpoint, decode_delta, encode_checkpoint, encode_delta, FrameDelta};
use crate::storage::dataset::FrameData;
use crate::train::{scene_extent, View};

/// Quantities fixed for a whole stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamContext {
    /// Box of the initial cloud, outliers removed.
    pub bounds: SceneBounds,
    /// Region edge per level, fine to coarse.
    pub edges: Vec<f64>,
    /// Scale for position step sizes.
    pub extent: f64,
}

impl StreamContext {
    pub fn new(initial: &GaussianCloud, cameras: &[&Camera], cfg: &TrainConfig) -> Result<Self> {
        let bounds = compute_bounds(initial, cfg.outlier_quantile)?;
        let edges = level_edges(initial.len(), &bounds, cfg.max_gaussians_per_region, cfg.motion_levels)?;
        Ok(Self {
            bounds,
            edges,
            extent: scene_extent(cameras),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FrameResult {
    pub frame_index: usize,
    pub reference_frame: usize,
    pub delta: FrameDelta,
    pub delta_bytes: usize,
    /// Test-view PSNR of the frame's full cloud (before rebalance pruning).
    pub psnr_test: f64,
    /// Test-view PSNR of the reference cloud without any update.
    pub psnr_unmoved: f64,
    pub train_wall_seconds: f64,
    /// Size of the committed cloud.
    pub gaussian_count: usize,
    /// Mean per-Gaussian translation applied by the motion stage.
    pub mean_translation: [f64; 3],
    pub refine: RefineReport,
}

/// A learned frame with the clouds it produced.
#[derive(Debug, Clone)]
pub struct LearnedFrame {
    pub result: FrameResult,
    /// Moved base plus additions: what frame `t` renders.
    pub current: GaussianCloud,
    /// `current` after rebalance pruning: the reference for later frames.
    pub committed: GaussianCloud,
    /// Fitted field, the warm-start source for the next frame.
    pub field: MotionField,
}

/// Applies `delta` to its reference frame's committed cloud and returns the
/// frame's full cloud and its pruned successor.
pub fn commit_frame(reference: &GaussianCloud, delta: &FrameDelta) -> Result<(GaussianCloud, GaussianCloud)> {
    let field = MotionField::from_grids(reference, delta.levels.clone());
    let mut current = apply_motion(reference, &field)?.quantized_f32();
    current.extend_from(&delta.added);
    let n = current.len();
    let mut keep = vec![true; n];
    let mut prev = None;
    for &i in &delta.pruned {
        let i = i as usize;
        if i >= n || prev.is_some_and(|p| p >= i) {
            return Err(Error::InvalidArgument(format!(
                "frame {}: bad pruned index {i} for {n} gaussians",
                delta.frame_index
            )));
        }
        keep[i] = false;
        prev = Some(i);
    }
    let mut committed = current.clone();
    committed.retain_mask(&keep);
    Ok((current, committed))
}

fn frame_rng(cfg: &TrainConfig, frame: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((frame as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn test_psnr(cloud: &GaussianCloud, view: &View, bg: &Vec3) -> Result<f64> {
    psnr(&render(cloud, &view.0, bg), &view.1)
}

/// Learns one frame from `reference` (the committed cloud of frame
/// `reference_index`), warm-starting from `prev_field` when given.
pub fn learn_frame(
    reference: &GaussianCloud,
    reference_index: usize,
    frame: &FrameData,
    prev_field: Option<&MotionField>,
    ctx: &StreamContext,
    cfg: &TrainConfig,
) -> Result<LearnedFrame> {
    let start = Instant::now();
    let bg = Vec3::from(cfg.background);
    let (motion_steps, refine_steps) = cfg.effective_steps();

    let mut field = MotionField::assign(reference, &ctx.edges);
    if let (Some(prev), true) = (prev_field, cfg.motion_enabled) {
        field.inherit(&warm_start(prev, cfg.warm_start_factor));
    }
    let fit = optimize_motion(reference, field, &frame.train, motion_steps, cfg, ctx.extent)?;
    let mut field = fit.field;
    field.quantize_f32();
    let moved = apply_motion(reference, &field)?.quantized_f32();
    let candidates = if cfg.refine_enabled {
        select_clone_candidates(&fit.grad_accum.mean(), cfg.grad_clone_threshold, cfg.clone_cap_fraction)
    } else {
        Vec::new()
    };
    let mut rng = frame_rng(cfg, frame.index);
    let additions = refine_new_gaussians(
        &moved,
        moved.select(&candidates),
        &frame.train,
        refine_steps,
        cfg,
        ctx.extent,
        &mut rng,
    )?
    .quantized_f32();
    let (_, pruned) = merge_and_rebalance(&moved, &additions)?;
    let delta = FrameDelta::new(frame.index as u32, reference_index as u32, &field, additions, pruned);
    let (current, committed) = commit_frame(reference, &delta)?;
    let train_wall_seconds = start.elapsed().as_secs_f64();

    let psnr_before = test_psnr(&moved, &frame.test, &bg)?;
    let psnr_after = test_psnr(&current, &frame.test, &bg)?;
    let psnr_unmoved = test_psnr(reference, &frame.test, &bg)?;
    let mut mean = Vec3::zeros();
    for i in 0..reference.len() {
        mean += compose_motion(&field, i).0;
    }
    mean /= reference.len().max(1) as f64;

    let refine = RefineReport {
        cloned_count: delta.added.len(),
        pruned_indices: delta.pruned.clone(),
        pre_count: reference.len(),
        post_count: committed.len(),
        psnr_before,
        psnr_after,
    };
    log::debug!(
        "frame {}: psnr {:.2} dB (unmoved {:.2}), {} added, {:.2}s",
        frame.index,
        psnr_after,
        psnr_unmoved,
        delta.added.len(),
        train_wall_seconds
    );
    Ok(LearnedFrame {
        result: FrameResult {
            frame_index: frame.index,
            reference_frame: reference_index,
            delta_bytes: delta.encoded_len(),
            delta,
            psnr_test: psnr_after,
            psnr_unmoved,
            train_wall_seconds,
            gaussian_count: committed.len(),
            mean_translation: [mean.x, mean.y, mean.z],
            refine,
        },
        current,
        committed,
        field,
    })
}

#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub results: Vec<FrameResult>,
    /// Wall time for all learned frames.
    pub wall_seconds: f64,
    pub final_cloud: GaussianCloud,
}

impl StreamOutcome {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.results.iter().map(|r| r.psnr_test))
    }

    pub fn seconds_per_frame(&self) -> f64 {
        self.wall_seconds / self.results.len().max(1) as f64
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Receives every learned frame in frame order, e.g. to persist it.
pub type FrameSink<'a> = dyn FnMut(&LearnedFrame) -> Result<()> + 'a;

fn wrap(index: usize, e: Error) -> Error {
    Error::Frame {
        index,
        source: Box::new(e),
    }
}

/// Learns `frames` in order, each from its predecessor's committed cloud.
/// `initial` is frame 0's committed cloud.
pub fn stream_sequential(
    initial: &GaussianCloud,
    frames: impl IntoIterator<Item = Result<FrameData>>,
    ctx: &StreamContext,
    cfg: &TrainConfig,
    sink: &mut FrameSink,
) -> Result<StreamOutcome> {
    let start = Instant::now();
    let mut reference = initial.clone();
    let mut reference_index = 0;
    let mut field: Option<MotionField> = None;
    let mut results = Vec::new();
    for frame in frames {
        let frame = frame?;
        let learned = learn_frame(&reference, reference_index, &frame, field.as_ref(), ctx, cfg)
            .map_err(|e| wrap(frame.index, e))?;
        sink(&learned)?;
        reference_index = frame.index;
        reference = learned.committed;
        field = Some(learned.field);
        results.push(learned.result);
    }
    Ok(StreamOutcome {
        results,
        wall_seconds: start.elapsed().as_secs_f64(),
        final_cloud: reference,
    })
}

/// Learns frames in groups of `k`, every frame of a group from the same
/// reference (the last committed cloud of the previous group) and warm-started
/// from the same field. Groups run concurrently; results are emitted in frame
/// order.
pub fn stream_parallel(
    initial: &GaussianCloud,
    frames: impl IntoIterator<Item = Result<FrameData>>,
    k: usize,
    ctx: &StreamContext,
    cfg: &TrainConfig,
    sink: &mut FrameSink,
) -> Result<StreamOutcome> {
    if k == 0 {
        return Err(Error::InvalidArgument("parallel group size must be >= 1".into()));
    }
    let start = Instant::now();
    let mut reference = initial.clone();
    let mut reference_index = 0;
    let mut field: Option<MotionField> = None;
    let mut results = Vec::new();
    let mut frames = frames.into_iter();
    loop {
        let group = frames.by_ref().take(k).collect::<Result<Vec<FrameData>>>()?;
        if group.is_empty() {
            break;
        }
        let learned: Vec<Result<LearnedFrame>> = group
            .par_iter()
            .map(|f| {
                learn_frame(&reference, reference_index, f, field.as_ref(), ctx, cfg).map_err(|e| wrap(f.index, e))
            })
            .collect();
        let mut last = None;
        for l in learned {
            let l = l?;
            sink(&l)?;
            results.push(l.result.clone());
            last = Some(l);
        }
        let last = last.expect("group is non-empty");
        reference_index = last.result.frame_index;
        reference = last.committed;
        field = Some(last.field);
    }
    Ok(StreamOutcome {
        results,
        wall_seconds: start.elapsed().as_secs_f64(),
        final_cloud: reference,
    })
}

pub const STREAM_CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.hckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "frame,psnr_db,wall_seconds,gaussians,delta_bytes";

pub fn delta_file_name(frame: usize) -> String {
    format!("frame_{frame:06}.hcom")
}

/// A replayable stream: initial checkpoint plus ordered per-frame deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneStream {
    pub config: TrainConfig,
    pub checkpoint: GaussianCloud,
    pub deltas: Vec<FrameDelta>,
}

/// One frame reconstructed from a stream.
#[derive(Debug, Clone)]
pub struct ReplayedFrame {
    pub index: usize,
    pub current: GaussianCloud,
    pub committed: GaussianCloud,
}

impl SceneStream {
    /// Reads a stream directory written by [`StreamWriter`].
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg_path = dir.join(STREAM_CONFIG_FILE);
        if !cfg_path.is_file() {
            return Err(Error::MissingFile(cfg_path));
        }
        let config = serde_json::from_slice(&fs::read(cfg_path)?)?;
        let ck_path = dir.join(CHECKPOINT_FILE);
        if !ck_path.is_file() {
            return Err(Error::MissingFile(ck_path));
        }
        let checkpoint = decode_checkpoint(&fs::read(ck_path)?)?;
        let mut deltas = Vec::new();
        for i in 1.. {
            let p = dir.join(delta_file_name(i));
            if !p.is_file() {
                break;
            }
            deltas.push(decode_delta(&fs::read(p)?)?);
        }
        Ok(Self {
            config,
            checkpoint,
            deltas,
        })
    }

    pub fn frame_count(&self) -> usize {
        1 + self.deltas.len()
    }

    /// Every frame's clouds, frame 0 first.
    pub fn replay(&self) -> Result<Vec<ReplayedFrame>> {
        let mut out = vec![ReplayedFrame {
            index: 0,
            current: self.checkpoint.clone(),
            committed: self.checkpoint.clone(),
        }];
        let mut committed: BTreeMap<usize, usize> = BTreeMap::from([(0, 0)]);
        for d in &self.deltas {
            let r = d.reference_frame as usize;
            let slot = *committed.get(&r).ok_or_else(|| {
                Error::InvalidArgument(format!("frame {} references unknown frame {r}", d.frame_index))
            })?;
            let (current, next) = commit_frame(&out[slot].committed, d)?;
            committed.insert(d.frame_index as usize, out.len());
            out.push(ReplayedFrame {
                index: d.frame_index as usize,
                current,
                committed: next,
            });
        }
        Ok(out)
    }
}

/// Writes a stream directory incrementally, so an aborted run leaves every
/// completed frame on disk.
pub struct StreamWriter {
    dir: PathBuf,
    metrics: fs::File,
}

impl StreamWriter {
    pub fn create(dir: impl AsRef<Path>, cfg: &TrainConfig, checkpoint: &GaussianCloud) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(STREAM_CONFIG_FILE), serde_json::to_vec_pretty(cfg)?)?;
        fs::write(dir.join(CHECKPOINT_FILE), encode_checkpoint(checkpoint))?;
        let mut metrics = fs::File::create(dir.join(METRICS_FILE))?;
        writeln!(metrics, "{METRICS_HEADER}")?;
        Ok(Self { dir, metrics })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_frame(&mut self, r: &FrameResult) -> Result<()> {
        let bytes = encode_delta(&r.delta);
        debug_assert_eq!(bytes.len(), r.delta_bytes);
        fs::write(self.dir.join(delta_file_name(r.frame_index)), &bytes)?;
        writeln!(
            self.metrics,
            "{},{},{},{},{}",
            r.frame_index,
            r.psnr_test,
            r.train_wall_seconds,
            r.gaussian_count,
            bytes.len()
        )?;
        self.metrics.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::synthetic::{MotionScript, SceneSpec, SyntheticDataset};
    use crate::train::train_initial;

    fn tiny() -> (SyntheticDataset, TrainConfig) {
        let spec = SceneSpec {
            blob_count: 6,
            camera_count: 4,
            image_width: 24,
            image_height: 24,
            frame_count: 4,
            test_camera_index: 1,
            seeds_per_blob: 3,
            motion: MotionScript::Translate {
                velocity: [0.04, 0.0, 0.0],
            },
            ..Default::default()
        };
        let cfg = TrainConfig {
            init_steps: 30,
            motion_steps: 6,
            refine_steps: 4,
            refine_densify_interval: 2,
            densify_start_step: 10,
            init_densify_interval: 10,
            grad_clone_threshold: 1e-6,
            clone_cap_fraction: 0.2,
            ..Default::default()
        };
        (SyntheticDataset::generate(&spec, 5).unwrap(), cfg)
    }

    fn setup() -> (SyntheticDataset, TrainConfig, GaussianCloud, StreamContext) {
        let (ds, cfg) = tiny();
        let f0 = ds.frame(0);
        let init = train_initial(&f0.train, &ds.seeds, &cfg).unwrap();
        let cams: Vec<&Camera> = ds.cameras.iter().collect();
        let ctx = StreamContext::new(&init, &cams, &cfg).unwrap();
        (ds, cfg, init, ctx)
    }

    #[test]
    fn zero_steps_gives_identity_delta() {
        let (ds, mut cfg, init, ctx) = setup();
        cfg.motion_steps = 0;
        cfg.refine_steps = 0;
        let f = ds.frame(1);
        let out = learn_frame(&init, 0, &f, None, &ctx, &cfg).unwrap();
        assert!(out.result.delta.levels.iter().all(|g| g.entries.values().all(|p| p.is_identity())));
        assert!(out.result.delta.added.is_empty());
        assert!(out.committed.bit_eq(&init));
        assert_eq!(out.result.psnr_test, out.result.psnr_unmoved);
    }

    #[test]
    fn count_is_conserved_and_replay_is_exact() {
        let (ds, cfg, init, ctx) = setup();
        let mut committed = vec![init.clone()];
        let mut deltas = Vec::new();
        let outcome = stream_sequential(
            &init,
            (1..ds.frame_count()).map(|t| Ok(ds.frame(t))),
            &ctx,
            &cfg,
            &mut |l: &LearnedFrame| {
                committed.push(l.committed.clone());
                deltas.push(l.result.delta.clone());
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(outcome.results.len(), 3);
        for r in &outcome.results {
            assert_eq!(r.gaussian_count, init.len());
            assert_eq!(r.refine.pruned_indices.len(), r.refine.cloned_count);
        }
        assert!(outcome.results.iter().any(|r| r.refine.cloned_count > 0));
        let stream = SceneStream {
            config: cfg.clone(),
            checkpoint: init.clone(),
            deltas: deltas
                .iter()
                .map(|d| decode_delta(&encode_delta(d)).unwrap())
                .collect(),
        };
        let replayed = stream.replay().unwrap();
        for (r, c) in replayed.iter().zip(&committed) {
            assert!(r.committed.bit_eq(c), "frame {}", r.index);
        }
    }

    #[test]
    fn single_frame_groups_match_sequential() {
        let (ds, cfg, init, ctx) = setup();
        let frames = || (1..ds.frame_count()).map(|t| Ok(ds.frame(t)));
        let a = stream_sequential(&init, frames(), &ctx, &cfg, &mut |_: &LearnedFrame| Ok(())).unwrap();
        let b = stream_parallel(&init, frames(), 1, &ctx, &cfg, &mut |_: &LearnedFrame| Ok(())).unwrap();
        for (x, y) in a.results.iter().zip(&b.results) {
            assert_eq!(encode_delta(&x.delta), encode_delta(&y.delta));
        }
        assert!(a.final_cloud.bit_eq(&b.final_cloud));
    }

    #[test]
    fn parallel_frames_share_the_reference() {
        let (ds, cfg, init, ctx) = setup();
        let frames = || (1..ds.frame_count()).map(|t| Ok(ds.frame(t)));
        let out = stream_parallel(&init, frames(), 2, &ctx, &cfg, &mut |_: &LearnedFrame| Ok(())).unwrap();
        let refs: Vec<usize> = out.results.iter().map(|r| r.reference_frame).collect();
        assert_eq!(refs, vec![0, 0, 2]);
        // order within a group does not matter
        let swapped = [ds.frame(2), ds.frame(1)];
        let l2 = learn_frame(&init, 0, &swapped[0], None, &ctx, &cfg).unwrap();
        assert_eq!(encode_delta(&l2.result.delta), encode_delta(&out.results[1].delta));
    }

    #[test]
    fn stream_directory_round_trip() {
        let (ds, cfg, init, ctx) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mut writer = StreamWriter::create(dir.path(), &cfg, &init).unwrap();
        let mut committed = vec![init.clone()];
        stream_sequential(
            &init,
            (1..ds.frame_count()).map(|t| Ok(ds.frame(t))),
            &ctx,
            &cfg,
            &mut |l: &LearnedFrame| {
                committed.push(l.committed.clone());
                writer.write_frame(&l.result)
            },
        )
        .unwrap();
        let stream = SceneStream::read(dir.path()).unwrap();
        assert_eq!(stream.frame_count(), 4);
        assert_eq!(stream.config, cfg);
        let replayed = stream.replay().unwrap();
        for (r, c) in replayed.iter().zip(&committed) {
            assert!(r.committed.bit_eq(c));
        }
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 3);
        for (i, row) in rows.iter().enumerate() {
            let bytes: usize = row.rsplit(',').next().unwrap().parse().unwrap();
            let file = dir.path().join(delta_file_name(i + 1));
            assert_eq!(bytes as u64, fs::metadata(file).unwrap().len());
        }
    }

    #[test]
    fn bad_pruned_indices_are_rejected() {
        let (_, _, init, ctx) = setup();
        let field = MotionField::assign(&init, &ctx.edges);
        let d = FrameDelta::new(1, 0, &field, GaussianCloud::new(), vec![3, 3]);
        assert!(commit_frame(&init, &d).is_err());
        let d = FrameDelta::new(1, 0, &field, GaussianCloud::new(), vec![init.len() as u32]);
        assert!(commit_frame(&init, &d).is_err());
    }
}
