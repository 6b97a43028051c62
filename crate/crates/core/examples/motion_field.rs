//! Builds the three-level region hierarchy over a cloud, moves one coarse
//! region and one fine region, and reports parameter counts and the motion
//! each Gaussian receives.
//!
//! ```text
//! cargo run --release --example motion_field -- [gaussians] [gaussians_per_region]
//! ```

use splatstream::math::{Quat, Vec3};
use splatstream::motion::{apply_motion, build_motion_field, compose_motion, warm_start};
use splatstream::storage::synthetic::{SceneSpec, SyntheticDataset};
use splatstream::{compute_bounds, GaussianCloud};

fn main() -> splatstream::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let m: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let spec = SceneSpec {
        blob_count: 20,
        seeds_per_blob: n.div_ceil(20),
        frame_count: 1,
        ..Default::default()
    };
    let ds = SyntheticDataset::generate(&spec, 3)?;
    let cloud = GaussianCloud::from_gaussians(ds.seeds.iter().map(|s| splatstream::Gaussian {
        position: Vec3::from(s.position),
        ..Default::default()
    }));
    let bounds = compute_bounds(&cloud, 0.01)?;
    let mut field = build_motion_field(&cloud, &bounds, m, 3)?;
    for g in &field.grids {
        println!("level {}: edge {:.4}, {} occupied regions", g.level, g.edge, g.entries.len());
    }
    println!(
        "{} Gaussians, {} motion scalars ({:.2} per Gaussian)",
        cloud.len(),
        field.scalar_count(),
        field.scalar_count() as f64 / cloud.len() as f64
    );

    // shift the coarse region of Gaussian 0 and spin the fine region of Gaussian 0
    let coarse = field.assignments[2][0];
    let fine = field.assignments[0][0];
    field.grids[2].entries.get_mut(&coarse).unwrap().d_mu = Vec3::new(0.1, 0.0, 0.0);
    let half = 0.25f64;
    field.grids[0].entries.get_mut(&fine).unwrap().d_q = Quat::new(half.cos(), 0.0, 0.0, half.sin());
    let moved = apply_motion(&cloud, &field)?;
    let shifted = (0..cloud.len()).filter(|&i| moved.positions[i] != cloud.positions[i]).count();
    let turned = (0..cloud.len()).filter(|&i| moved.rotations[i] != cloud.rotations[i]).count();
    println!("{shifted} Gaussians translated by the coarse region, {turned} rotated by the fine region");
    let (d_mu, d_q) = compose_motion(&field, 0);
    println!("Gaussian 0: summed dmu {:?}, summed dq {:?}", d_mu.as_slice(), d_q.as_slice());
    let next = warm_start(&field, 0.6);
    println!(
        "warm start: coarse dmu.x {:.3}",
        next.grids[2].entries[&coarse].d_mu.x
    );
    Ok(())
}
