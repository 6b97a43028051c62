//! Generates a translating synthetic scene, trains frame 0 and streams the
//! remaining frames, printing per-frame PSNR, motion and delta size.
//!
//! ```text
//! cargo run --release --example stream_synthetic -- [frames] [init_steps] [motion_steps]
//! ```

use splatstream::config::TrainConfig;
use splatstream::pipeline::{stream_sequential, LearnedFrame, StreamContext};
use splatstream::storage::codec::checkpoint_size;
use splatstream::storage::synthetic::{MotionScript, SceneSpec, SyntheticDataset};
use splatstream::train::train_initial;
use splatstream::Camera;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> splatstream::Result<()> {
    // SPEC=path.json overrides the default translating scene
    let mut spec: SceneSpec = match std::env::var("SPEC") {
        Ok(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        Err(_) => SceneSpec {
            motion: MotionScript::Translate {
                velocity: [0.05, 0.0, 0.0],
            },
            ..Default::default()
        },
    };
    spec.frame_count = arg(1, 6);
    let ds = SyntheticDataset::generate(&spec, 7)?;
    let cfg = TrainConfig {
        init_steps: arg(2, 1500),
        split_stop_step: arg(2, 1500) / 2,
        motion_steps: arg(3, 100),
        refine_enabled: std::env::var("NO_REFINE").is_err(),
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let f0 = ds.frame(0);
    let init = train_initial(&f0.train, &ds.seeds, &cfg)?;
    println!("init: {} gaussians in {:.1}s", init.len(), t0.elapsed().as_secs_f64());
    let cams: Vec<&Camera> = ds.cameras.iter().collect();
    let ctx = StreamContext::new(&init, &cams, &cfg)?;
    println!("region edges {:?}, extent {:.3}", ctx.edges, ctx.extent);
    let field = splatstream::motion::MotionField::assign(&init, &ctx.edges);
    let per_level: Vec<usize> = field.grids.iter().map(|g| g.entries.len()).collect();
    println!("occupied regions per level {per_level:?}");
    let bg = splatstream::math::Vec3::from(cfg.background);
    let p0 = splatstream::loss::psnr(&splatstream::raster::render(&init, &f0.test.0, &bg), &f0.test.1)?;
    println!("frame 0 test psnr {p0:.2} dB");
    let frames = (1..ds.frame_count()).map(|t| Ok(ds.frame(t)));
    let out = stream_sequential(&init, frames, &ctx, &cfg, &mut |l: &LearnedFrame| {
        let r = &l.result;
        println!(
            "frame {:>3}: psnr {:6.2} dB (unmoved {:6.2}), mean dmu [{:+.4} {:+.4} {:+.4}], +{} gaussians, {} bytes, {:.2}s",
            r.frame_index,
            r.psnr_test,
            r.psnr_unmoved,
            r.mean_translation[0],
            r.mean_translation[1],
            r.mean_translation[2],
            r.refine.cloned_count,
            r.delta_bytes,
            r.train_wall_seconds
        );
        Ok(())
    })?;
    println!(
        "mean psnr {:.2} dB, {:.2} s/frame, checkpoint {} bytes",
        out.mean_psnr(),
        out.seconds_per_frame(),
        checkpoint_size(init.len())
    );
    Ok(())
}
