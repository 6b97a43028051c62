//! Trains a frame-0 cloud on a synthetic scene with and without position
//! perturbation and compares Gaussian counts and held-out PSNR.
//!
//! ```text
//! cargo run --release --example train_initial -- [steps] [seed] [split_stop_step]
//! ```

use splatstream::config::TrainConfig;
use splatstream::loss::psnr;
use splatstream::math::Vec3;
use splatstream::raster::render;
use splatstream::storage::synthetic::{SceneSpec, SyntheticDataset};
use splatstream::train::train_initial;

fn main() -> splatstream::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(1500);
    let seed = args.get(1).copied().unwrap_or(0) as u64;
    let spec = SceneSpec {
        blob_count: 12,
        scene_radius: 0.9,
        camera_radius: 3.0,
        blob_scale: [0.04, 0.1],
        seeds_per_blob: 30,
        frame_count: 1,
        ..Default::default()
    };
    let ds = SyntheticDataset::generate(&spec, seed)?;
    let frame = ds.frame(0);
    println!("{} seed points, {} training views", ds.seeds.len(), frame.train.len());
    let lambdas: Vec<f64> = std::env::var("LAMBDAS")
        .map(|s| s.split(',').filter_map(|t| t.parse().ok()).collect())
        .unwrap_or_else(|_| vec![0.0, 0.01]);
    for lambda_noise in lambdas {
        let cfg = TrainConfig {
            seed,
            lambda_noise,
            init_steps: steps,
            split_stop_step: args.get(2).copied().unwrap_or(steps / 2),
            ..Default::default()
        };
        let t = std::time::Instant::now();
        let cloud = train_initial(&frame.train, &ds.seeds, &cfg)?;
        let p = psnr(&render(&cloud, &frame.test.0, &Vec3::zeros()), &frame.test.1)?;
        println!(
            "lambda_noise {lambda_noise:<5}: {:>5} gaussians, test psnr {p:.2} dB, {:.1}s",
            cloud.len(),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
