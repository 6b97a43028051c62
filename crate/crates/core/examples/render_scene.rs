//! Renders a random cloud from a camera ring with the tiled rasterizer and
//! the per-pixel reference renderer, and writes both to PNG.
//!
//! ```text
//! cargo run --release --example render_scene -- [out_dir] [gaussians]
//! ```

use std::time::Instant;

use splatstream::math::Vec3;
use splatstream::raster::{render, Prepared};
use splatstream::storage::dataset::write_png;
use splatstream::storage::synthetic::{oracle_render, SceneSpec, SyntheticDataset};

fn main() -> splatstream::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "renders".into()));
    let blobs = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let spec = SceneSpec {
        blob_count: blobs,
        blob_scale: [0.03, 0.12],
        view_dependence: 0.3,
        image_width: 256,
        image_height: 256,
        frame_count: 1,
        ..Default::default()
    };
    let ds = SyntheticDataset::generate(&spec, 1)?;
    let cloud = ds.cloud_at(0);
    let gaussians: Vec<_> = cloud.iter().collect();
    let bg = Vec3::new(0.05, 0.05, 0.1);
    std::fs::create_dir_all(&out)?;
    for (c, cam) in ds.cameras.iter().enumerate().step_by(2) {
        let t = Instant::now();
        let prepared = Prepared::new(&cloud, cam);
        let fast = prepared.render(&bg);
        let fast_ms = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let slow = oracle_render(&gaussians, cam, &bg);
        let slow_ms = t.elapsed().as_secs_f64() * 1e3;
        println!(
            "camera {c}: {} visible, tiled {fast_ms:.1} ms, reference {slow_ms:.1} ms, mean |diff| {:.2e}",
            prepared.visible_count(),
            fast.mean_abs_diff(&slow)?
        );
        write_png(&out.join(format!("cam_{c:02}.png")), &render(&cloud, cam, &bg))?;
        write_png(&out.join(format!("cam_{c:02}_reference.png")), &slow)?;
    }
    println!("wrote renders to {}", out.display());
    Ok(())
}
