//! Photometric training objective and evaluation metrics.

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_LAMBDA_DSSIM: f64 = 0.2;
/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub lambda: f64,
}

/// Mean absolute difference and its gradient with respect to `a`.
pub fn l1_loss(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    a.check_same_dims(b)?;
    let count = a.rgb.len().max(1) as f64;
    let mut grad = ImageBuffer::new(a.width, a.height);
    let mut sum = 0.0;
    for ((g, x), y) in grad.rgb.iter_mut().zip(&a.rgb).zip(&b.rgb) {
        let d = x - y;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / count
        } else if d < 0.0 {
            -1.0 / count
        } else {
            0.0
        };
    }
    Ok((sum / count, grad))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable filtering of a `w × h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-sized map back to `w × h`.
fn filter_valid_adjoint(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for (t, kv) in k.iter().enumerate() {
                tmp[(y + t) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (t, kv) in k.iter().enumerate() {
                out[y * w + x + t] += kv * v;
            }
        }
    }
    out
}

fn channel(img: &ImageBuffer, ch: usize) -> Vec<f64> {
    img.rgb.iter().skip(ch).step_by(3).copied().collect()
}

/// Mean SSIM over all valid window positions and channels, with its gradient
/// with respect to `a`.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    a.check_same_dims(b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let k = gaussian_window();
    let n_loc = (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let norm = 1.0 / (n_loc * 3) as f64;
    let mut total = 0.0;
    let mut grad = ImageBuffer::new(w, h);
    for ch in 0..3 {
        let x = channel(a, ch);
        let y = channel(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let exx = filter_valid(&xx, w, h, &k);
        let eyy = filter_valid(&yy, w, h, &k);
        let exy = filter_valid(&xy, w, h, &k);
        let mut d_mx = vec![0.0; n_loc];
        let mut d_exx = vec![0.0; n_loc];
        let mut d_exy = vec![0.0; n_loc];
        for p in 0..n_loc {
            let (ux, uy) = (mx[p], my[p]);
            let sxx = exx[p] - ux * ux;
            let syy = eyy[p] - uy * uy;
            let sxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let den = b1 * b2;
            let s = a1 * a2 / den;
            total += s;
            d_mx[p] = norm
                * (2.0 * uy * a2 / den - 2.0 * ux * s / b1 - 2.0 * uy * a1 / den
                    + 2.0 * ux * s / b2);
            d_exx[p] = norm * (-s / b2);
            d_exy[p] = norm * (2.0 * a1 / den);
        }
        let g_m = filter_valid_adjoint(&d_mx, w, h, &k);
        let g_xx = filter_valid_adjoint(&d_exx, w, h, &k);
        let g_xy = filter_valid_adjoint(&d_exy, w, h, &k);
        for i in 0..w * h {
            grad.rgb[i * 3 + ch] = g_m[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i];
        }
    }
    Ok((total * norm, grad))
}

/// `1 - max(SSIM, 0)` and its gradient with respect to `a`.
pub fn dssim_loss(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    let (s, mut grad) = ssim(a, b)?;
    if s <= 0.0 {
        grad.rgb.iter_mut().for_each(|g| *g = 0.0);
        return Ok((1.0, grad));
    }
    grad.rgb.iter_mut().for_each(|g| *g = -*g);
    Ok((1.0 - s, grad))
}

/// `(1 - λ)·L1 + λ·D-SSIM`. The D-SSIM term is skipped entirely when `λ = 0`,
/// so tiny images remain usable with a pure L1 objective.
pub fn combined_loss(a: &ImageBuffer, b: &ImageBuffer, lambda: f64) -> Result<(LossValue, ImageBuffer)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let (l1, g1) = l1_loss(a, b)?;
    if lambda == 0.0 {
        return Ok((
            LossValue {
                total: l1,
                l1,
                dssim: 0.0,
                lambda,
            },
            g1,
        ));
    }
    let (ds, gd) = dssim_loss(a, b)?;
    if lambda == 1.0 {
        return Ok((
            LossValue {
                total: ds,
                l1,
                dssim: ds,
                lambda,
            },
            gd,
        ));
    }
    let mut grad = g1;
    for (g, d) in grad.rgb.iter_mut().zip(&gd.rgb) {
        *g = (1.0 - lambda) * *g + lambda * d;
    }
    Ok((
        LossValue {
            total: (1.0 - lambda) * l1 + lambda * ds,
            l1,
            dssim: ds,
            lambda,
        },
        grad,
    ))
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_dims(b)?;
    let sum: f64 = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.rgb.len().max(1) as f64)
}

/// Peak signal-to-noise ratio for `[0, 1]` images, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}
