//! Ablations on synthetic scenes: position noise during initial training,
//! motion off, refinement off, fine-level-only motion, and parallel frame
//! groups.
//!
//! ```text
//! cargo run --release --example ablations -- noise|motion|refine|levels|parallel
//! SEED=2 cargo run --release --example ablations -- levels
//! ```

use splatstream::config::TrainConfig;
use splatstream::gaussian::GaussianCloud;
use splatstream::pipeline::{stream_parallel, LearnedFrame, StreamContext, StreamOutcome};
use splatstream::storage::synthetic::{MotionScript, SceneSpec, SyntheticDataset};
use splatstream::train::train_initial;
use splatstream::Camera;

fn seed(which: &str) -> u64 {
    let default = if which == "levels" { 1 } else { 3 };
    std::env::var("SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}
const VELOCITY: [f64; 3] = [0.05, 0.0, 0.0];

fn base_spec(frames: usize) -> SceneSpec {
    SceneSpec {
        blob_count: 12,
        scene_radius: 0.9,
        camera_radius: 3.0,
        blob_scale: [0.04, 0.1],
        seeds_per_blob: 30,
        frame_count: frames,
        ..Default::default()
    }
}

fn scene(name: &str) -> SceneSpec {
    match name {
        "motion" => SceneSpec {
            motion: MotionScript::Translate { velocity: VELOCITY },
            ..base_spec(6)
        },
        "refine" => {
            let mut s = SceneSpec {
                blob_count: 14,
                scene_radius: 0.6,
                ..base_spec(6)
            };
            s.per_blob = vec![MotionScript::Static; 14];
            for b in [3, 9] {
                s.per_blob[b] = MotionScript::Appear { frame: 2 };
            }
            s
        }
        // large blobs so coarse regions still cover one rigid piece
        "levels" => SceneSpec {
            blob_count: 6,
            scene_radius: 0.8,
            blob_scale: [0.12, 0.25],
            seeds_per_blob: 80,
            ..base_spec(6)
        },
        "noise" => SceneSpec {
            blob_count: 8,
            seeds_per_blob: 20,
            image_width: 48,
            image_height: 48,
            ..base_spec(1)
        },
        "parallel" => SceneSpec {
            motion: MotionScript::Translate {
                velocity: [0.02, 0.0, 0.0],
            },
            ..base_spec(17)
        },
        other => panic!("unknown ablation {other}"),
    }
}

fn stream(
    ds: &SyntheticDataset,
    init: &GaussianCloud,
    cfg: &TrainConfig,
    k: usize,
) -> splatstream::Result<StreamOutcome> {
    let cams: Vec<&Camera> = ds.cameras.iter().collect();
    let ctx = StreamContext::new(init, &cams, cfg)?;
    let frames = (1..ds.frame_count()).map(|t| Ok(ds.frame(t)));
    stream_parallel(init, frames, k, &ctx, cfg, &mut |_: &LearnedFrame| Ok(()))
}

fn report(label: &str, out: &StreamOutcome) {
    let per_frame: Vec<String> = out.results.iter().map(|r| format!("{:.2}", r.psnr_test)).collect();
    println!(
        "{label:<14} mean {:6.2} dB  {:5.2} s/frame  [{}]",
        out.mean_psnr(),
        out.seconds_per_frame(),
        per_frame.join(" ")
    );
}

fn main() -> splatstream::Result<()> {
    let which = std::env::args().nth(1).unwrap_or_else(|| "motion".into());
    let mut spec = scene(&which);
    if which == "levels" {
        // two rigid pieces split by the x = 0 plane
        let layout = SyntheticDataset::generate(&SceneSpec { frame_count: 1, ..spec.clone() }, seed(&which))?;
        spec.per_blob = layout
            .blobs
            .iter()
            .map(|g| MotionScript::Translate {
                velocity: if g.position.x < 0.0 { [0.06, 0.0, 0.0] } else { [0.0, -0.045, 0.03] },
            })
            .collect();
    }
    let ds = SyntheticDataset::generate(&spec, seed(&which))?;
    if which == "noise" {
        // the count gap only opens once pruning has had time to act
        for lambda in [0.0, 0.01] {
            let cfg = TrainConfig {
                lambda_noise: lambda,
                init_steps: 6000,
                split_stop_step: 3000,
                ..Default::default()
            };
            let cloud = train_initial(&ds.frame(0).train, &ds.seeds, &cfg)?;
            println!("lambda_noise {lambda:<5} {} gaussians", cloud.len());
        }
        return Ok(());
    }
    let cfg = TrainConfig {
        init_steps: 1500,
        split_stop_step: 750,
        ..Default::default()
    };
    let init = train_initial(&ds.frame(0).train, &ds.seeds, &cfg)?;
    println!("{which}: {} gaussians at frame 0", init.len());
    match which.as_str() {
        "motion" => {
            report("full", &stream(&ds, &init, &cfg, 1)?);
            let off = TrainConfig {
                motion_enabled: false,
                ..cfg.clone()
            };
            report("no motion", &stream(&ds, &init, &off, 1)?);
        }
        "refine" => {
            report("full", &stream(&ds, &init, &cfg, 1)?);
            let off = TrainConfig {
                refine_enabled: false,
                ..cfg.clone()
            };
            report("no refine", &stream(&ds, &init, &off, 1)?);
        }
        "levels" => {
            report("3 levels", &stream(&ds, &init, &cfg, 1)?);
            let fine = TrainConfig {
                motion_levels: 1,
                ..cfg.clone()
            };
            report("fine only", &stream(&ds, &init, &fine, 1)?);
        }
        "parallel" => {
            for k in [1, 4, 16] {
                report(&format!("k = {k}"), &stream(&ds, &init, &cfg, k)?);
            }
        }
        _ => unreachable!(),
    }
    Ok(())
}
