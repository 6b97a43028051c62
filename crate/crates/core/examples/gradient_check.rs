//! Compares the rasterizer's analytic gradients with central finite
//! differences on a few random Gaussians and prints the worst error per
//! attribute.
//!
//! ```text
//! cargo run --release --example gradient_check -- [gaussians] [seed]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatstream::gaussian::Attribute;
use splatstream::math::{Mat3, Quat, Vec3, SH_LEN};
use splatstream::raster::{render, render_fingerprint, render_with_grad};
use splatstream::{Camera, Gaussian, GaussianCloud, ImageBuffer};

fn main() -> splatstream::Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let seed = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = GaussianCloud::from_gaussians((0..n).map(|_| {
        let mut sh = [0.0; SH_LEN];
        sh.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        Gaussian {
            position: Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(2.5..3.5)),
            log_scale: Vec3::from_fn(|_, _| rng.random_range(-2.5..-1.3)),
            rotation: Quat::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            opacity_logit: rng.random_range(-1.0..2.0),
            sh,
        }
    }));
    let size = 24;
    let cam = Camera {
        rotation: Mat3::identity(),
        translation: Vec3::zeros(),
        fx: 30.0,
        fy: 30.0,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
        near: 0.01,
    };
    let bg = Vec3::new(0.1, 0.2, 0.3);
    // loss = sum of pixels weighted by a fixed random image
    let mut w = ImageBuffer::new(size, size);
    w.rgb.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let loss = |c: &GaussianCloud| -> f64 { render(c, &cam, &bg).rgb.iter().zip(&w.rgb).map(|(a, b)| a * b).sum() };
    let grads = render_with_grad(&cloud, &cam, &bg, &w)?;
    let fp = render_fingerprint(&cloud, &cam);
    let h = 1e-4;
    for attr in Attribute::ALL {
        let (mut worst, mut skipped) = (0.0f64, 0);
        for k in 0..cloud.flat(attr).len() {
            let mut plus = cloud.clone();
            let mut minus = cloud.clone();
            plus.flat_mut(attr)[k] += h;
            minus.flat_mut(attr)[k] -= h;
            if render_fingerprint(&plus, &cam) != fp || render_fingerprint(&minus, &cam) != fp {
                skipped += 1;
                continue;
            }
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.d.flat(attr)[k];
            let scale = an.abs().max(fd.abs());
            if scale > 1e-6 {
                worst = worst.max((an - fd).abs() / scale);
            }
        }
        println!("{attr:<10?} worst relative error {worst:.2e} ({skipped} skipped at discontinuities)");
    }
    Ok(())
}
