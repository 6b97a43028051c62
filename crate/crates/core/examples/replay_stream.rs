//! Learns a short stream into a directory, reads it back, replays every
//! frame from the checkpoint and deltas, and confirms the replay matches the
//! learner bit for bit.
//!
//! ```text
//! cargo run --release --example replay_stream -- [out_dir] [frames]
//! ```

use splatstream::config::TrainConfig;
use splatstream::pipeline::{stream_parallel, LearnedFrame, SceneStream, StreamContext, StreamWriter};
use splatstream::storage::synthetic::{MotionScript, SceneSpec, SyntheticDataset};
use splatstream::train::train_initial;
use splatstream::Camera;

fn main() -> splatstream::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "stream_out".into());
    let frames: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let spec = SceneSpec {
        blob_count: 10,
        image_width: 48,
        image_height: 48,
        frame_count: frames,
        motion: MotionScript::Rotate {
            axis: [0.0, 1.0, 0.0],
            omega: 0.05,
            pivot: [0.0; 3],
        },
        ..Default::default()
    };
    let ds = SyntheticDataset::generate(&spec, 2)?;
    let cfg = TrainConfig {
        init_steps: 600,
        split_stop_step: 300,
        motion_steps: 50,
        refine_steps: 50,
        parallel_frames: 2,
        ..Default::default()
    };
    let init = train_initial(&ds.frame(0).train, &ds.seeds, &cfg)?;
    let cams: Vec<&Camera> = ds.cameras.iter().collect();
    let ctx = StreamContext::new(&init, &cams, &cfg)?;
    let mut writer = StreamWriter::create(&out, &cfg, &init)?;
    let mut learned = Vec::new();
    let outcome = stream_parallel(
        &init,
        (1..frames).map(|t| Ok(ds.frame(t))),
        cfg.parallel_frames,
        &ctx,
        &cfg,
        &mut |l: &LearnedFrame| {
            learned.push(l.committed.clone());
            writer.write_frame(&l.result)
        },
    )?;
    for r in &outcome.results {
        println!(
            "frame {} (from frame {}): {:.2} dB, {} bytes",
            r.frame_index, r.reference_frame, r.psnr_test, r.delta_bytes
        );
    }
    let stream = SceneStream::read(&out)?;
    let replayed = stream.replay()?;
    let exact = replayed[1..].iter().zip(&learned).all(|(r, c)| r.committed.bit_eq(c));
    println!(
        "replayed {} frames from {out}: {}",
        replayed.len(),
        if exact { "bit-exact" } else { "MISMATCH" }
    );
    Ok(())
}
