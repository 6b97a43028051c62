//! Differentiable splatting rasterizer.
//!
//! Forward: every Gaussian is projected with the local affine approximation of
//! the perspective map, dilated by a 0.3 px² low-pass, depth sorted and
//! composited front to back per pixel. Backward: exact reverse-mode gradients
//! for every attribute, computed from the same per-pixel replay.
//!
//! Pixel `(x, y)` samples the image plane at `(x + 0.5, y + 0.5)`.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};
use crate::imagebuf::ImageBuffer;
use crate::math::{
    eval_sh_raw, normalize_vjp, quat_identity, quat_normalize, quat_to_matrix,
    quat_to_matrix_vjp, sh_basis, sigmoid, Mat3, Quat, Vec3, SH_C1, SH_COEFFS,
};

pub const LOW_PASS: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Splats whose center lies further than this many image diagonals outside
/// the frame are culled.
pub const OFFSCREEN_CULL: f64 = 1.3;
const TILE: usize = 16;

/// A Gaussian's footprint on the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean: [f64; 2],
    /// Dilated 2D covariance `(xx, xy, yy)`.
    pub cov: [f64; 3],
    /// Inverse of `cov`, `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: Vec3,
    pub alpha: f64,
    /// Radius beyond which the splat's alpha is below [`MIN_ALPHA`].
    pub radius: f64,
}

/// Per-Gaussian gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct RenderGrads {
    /// Gradient with respect to every stored attribute, same layout as the cloud.
    pub d: GaussianCloud,
    /// Norm of the gradient with respect to the projected center in NDC units.
    pub mean2d_grad_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl RenderGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            d: GaussianCloud::zeros(n),
            mean2d_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

struct Projection {
    p_cam: Vec3,
    j: nalgebra::Matrix2x3<f64>,
    v: Mat3,
    dir: Vec3,
    dist: f64,
    raw_color: Vec3,
}

fn project_full(g: &Gaussian, cam: &Camera) -> Option<(Splat2D, Projection)> {
    let p_cam = cam.to_camera(&g.position);
    let z = p_cam.z;
    if !(z > cam.near) {
        return None;
    }
    let (x, y) = (p_cam.x, p_cam.y);
    let mean = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];
    let (w, h) = (cam.width as f64, cam.height as f64);
    let outside = |v: f64, hi: f64| (-v).max(v - hi).max(0.0);
    let off = outside(mean[0], w).hypot(outside(mean[1], h));
    if !(off <= OFFSCREEN_CULL * w.hypot(h)) {
        return None;
    }
    let j = nalgebra::Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let v = cam.rotation * g.covariance() * cam.rotation.transpose();
    let c2 = j * v * j.transpose();
    let cov = [c2[(0, 0)] + LOW_PASS, c2[(0, 1)], c2[(1, 1)] + LOW_PASS];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let alpha = sigmoid(g.opacity_logit);
    if !(alpha * 255.0 > 1.0) {
        return None;
    }
    let mid = 0.5 * (cov[0] + cov[2]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    // Slightly generous so floating-point noise at the rim never drops a
    // contribution the alpha floor would keep.
    let radius = (2.0 * (255.0 * alpha).ln() * lambda_max).sqrt() * 1.0001 + 1e-9;
    let offset = g.position - cam.center();
    let dist = offset.norm();
    let dir = if dist > 0.0 { offset / dist } else { Vec3::z() };
    let raw_color = eval_sh_raw(&g.sh, &dir);
    let splat = Splat2D {
        mean,
        cov,
        conic,
        depth: z,
        color: raw_color.map(|c| c.max(0.0)),
        alpha,
        radius,
    };
    Some((
        splat,
        Projection {
            p_cam,
            j,
            v,
            dir,
            dist,
            raw_color,
        },
    ))
}

/// Projects one Gaussian, or `None` if it is culled (behind the near plane,
/// far off screen, or too transparent to ever pass the alpha floor).
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<Splat2D> {
    project_full(g, cam).map(|(s, _)| s)
}

/// Splat-space gradient accumulated during the pixel pass.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    alpha: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.alpha += o.alpha;
    }
}

fn backprop_projection(
    g: &Gaussian,
    cam: &Camera,
    splat: &Splat2D,
    proj: &Projection,
    sg: &SplatGrad,
    out: &mut GaussianCloud,
    i: usize,
) {
    let alpha = splat.alpha;
    out.opacity_logits[i] += sg.alpha * alpha * (1.0 - alpha);

    // color -> SH coefficients and view direction
    let basis = sh_basis(&proj.dir);
    let mut d_raw = [0.0; 3];
    for ch in 0..3 {
        if proj.raw_color[ch] > 0.0 {
            d_raw[ch] = sg.color[ch];
        }
    }
    let mut d_dir = Vec3::zeros();
    for ch in 0..3 {
        for k in 0..SH_COEFFS {
            out.sh[i][k * 3 + ch] += basis[k] * d_raw[ch];
        }
        d_dir.x += -SH_C1 * g.sh[3 * 3 + ch] * d_raw[ch];
        d_dir.y += -SH_C1 * g.sh[3 + ch] * d_raw[ch];
        d_dir.z += SH_C1 * g.sh[2 * 3 + ch] * d_raw[ch];
    }
    let mut d_pos = Vec3::zeros();
    if proj.dist > 0.0 {
        d_pos += (d_dir - proj.dir * proj.dir.dot(&d_dir)) / proj.dist;
    }

    // conic -> dilated covariance
    let [ca, cb, cc] = splat.cov;
    let det = ca * cc - cb * cb;
    let det2 = det * det;
    let [ga, gb, gc] = sg.conic;
    let d_cov_a = ga * (-cc * cc / det2) + gb * (cb * cc / det2) + gc * (-cb * cb / det2);
    let d_cov_b =
        ga * (2.0 * cb * cc / det2) + gb * (-(ca * cc + cb * cb) / det2) + gc * (2.0 * ca * cb / det2);
    let d_cov_c = ga * (-cb * cb / det2) + gb * (ca * cb / det2) + gc * (-ca * ca / det2);
    let g_sym = nalgebra::Matrix2::new(d_cov_a, 0.5 * d_cov_b, 0.5 * d_cov_b, d_cov_c);

    // 2D covariance -> camera covariance and Jacobian
    let j = &proj.j;
    let d_v = j.transpose() * g_sym * j;
    let d_j = 2.0 * g_sym * j * proj.v;
    let d_sigma = cam.rotation.transpose() * d_v * cam.rotation;

    let q_raw = g.rotation;
    let q = quat_normalize(&q_raw).unwrap_or_else(|_| quat_identity());
    let rot = quat_to_matrix(&q);
    let scale = g.log_scale.map(f64::exp);
    let m = rot * Mat3::from_diagonal(&scale);
    let d_m = 2.0 * d_sigma * m;
    let mut d_rot = Mat3::zeros();
    for k in 0..3 {
        let mut ds = 0.0;
        for r in 0..3 {
            d_rot[(r, k)] = d_m[(r, k)] * scale[k];
            ds += d_m[(r, k)] * rot[(r, k)];
        }
        out.log_scales[i][k] += ds * scale[k];
    }
    if q_raw.norm() > 1e-12 {
        let d_q: Quat = normalize_vjp(&q_raw, &quat_to_matrix_vjp(&q, &d_rot));
        out.rotations[i] += d_q;
    }

    // Jacobian and projected mean -> camera-space position
    let (x, y, z) = (proj.p_cam.x, proj.p_cam.y, proj.p_cam.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_pc = Vec3::zeros();
    d_pc.x += d_j[(0, 2)] * (-fx / z2);
    d_pc.y += d_j[(1, 2)] * (-fy / z2);
    d_pc.z += d_j[(0, 0)] * (-fx / z2)
        + d_j[(0, 2)] * (2.0 * fx * x / z3)
        + d_j[(1, 1)] * (-fy / z2)
        + d_j[(1, 2)] * (2.0 * fy * y / z3);
    d_pc.x += sg.mean[0] * fx / z;
    d_pc.z += sg.mean[0] * (-fx * x / z2);
    d_pc.y += sg.mean[1] * fy / z;
    d_pc.z += sg.mean[1] * (-fy * y / z2);
    d_pos += cam.rotation.transpose() * d_pc;
    out.positions[i] += d_pos;
}

struct Band {
    y0: usize,
    y1: usize,
    /// Sorted-splat indices touching this band, front to back.
    splats: Vec<u32>,
    /// Per tile column: positions into `splats`, front to back.
    tiles: Vec<Vec<u32>>,
}

/// Projected, depth-sorted and binned scene for one camera. Shared by the
/// forward and backward passes of a training step.
pub struct Prepared<'a> {
    cloud: &'a GaussianCloud,
    cam: &'a Camera,
    /// Splats in front-to-back order with their Gaussian index.
    splats: Vec<(usize, Splat2D, Projection)>,
    bands: Vec<Band>,
}

struct Contribution {
    slot: u32,
    alpha_hat: f64,
    gauss: f64,
    transmittance: f64,
    delta: [f64; 2],
    clamped: bool,
}

impl<'a> Prepared<'a> {
    pub fn new(cloud: &'a GaussianCloud, cam: &'a Camera) -> Self {
        let mut splats: Vec<(usize, Splat2D, Projection)> = (0..cloud.len())
            .into_par_iter()
            .filter_map(|i| project_full(&cloud.get(i), cam).map(|(s, p)| (i, s, p)))
            .collect();
        // stable, with index tie-break
        splats.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth).then(a.0.cmp(&b.0)));

        let tiles_x = cam.width.div_ceil(TILE);
        let tiles_y = cam.height.div_ceil(TILE);
        let mut bands: Vec<Band> = (0..tiles_y)
            .map(|ty| Band {
                y0: ty * TILE,
                y1: ((ty + 1) * TILE).min(cam.height),
                splats: Vec::new(),
                tiles: vec![Vec::new(); tiles_x],
            })
            .collect();
        let (w, h) = (cam.width as f64, cam.height as f64);
        for (si, (_, s, _)) in splats.iter().enumerate() {
            let x_lo = (s.mean[0] - s.radius - 0.5).ceil().max(0.0);
            let x_hi = (s.mean[0] + s.radius - 0.5).floor().min(w - 1.0);
            let y_lo = (s.mean[1] - s.radius - 0.5).ceil().max(0.0);
            let y_hi = (s.mean[1] + s.radius - 0.5).floor().min(h - 1.0);
            if x_lo > x_hi || y_lo > y_hi {
                continue;
            }
            let (tx0, tx1) = (x_lo as usize / TILE, x_hi as usize / TILE);
            let (ty0, ty1) = (y_lo as usize / TILE, y_hi as usize / TILE);
            for band in &mut bands[ty0..=ty1] {
                let slot = band.splats.len() as u32;
                band.splats.push(si as u32);
                for tile in &mut band.tiles[tx0..=tx1] {
                    tile.push(slot);
                }
            }
        }
        Self {
            cloud,
            cam,
            splats,
            bands,
        }
    }

    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }

    /// Front-to-back contributions at one pixel; returns final transmittance.
    fn pixel_contributions(&self, band: &Band, x: usize, y: usize, out: &mut Vec<Contribution>) -> f64 {
        out.clear();
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut t = 1.0;
        for &slot in &band.tiles[x / TILE] {
            let (_, s, _) = &self.splats[band.splats[slot as usize] as usize];
            let dx = px - s.mean[0];
            let dy = py - s.mean[1];
            let power = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
            let gauss = power.exp();
            let raw = s.alpha * gauss;
            let clamped = raw > MAX_ALPHA;
            let alpha_hat = if clamped { MAX_ALPHA } else { raw };
            if alpha_hat < MIN_ALPHA {
                continue;
            }
            out.push(Contribution {
                slot,
                alpha_hat,
                gauss,
                transmittance: t,
                delta: [dx, dy],
                clamped,
            });
            t *= 1.0 - alpha_hat;
            if t < MIN_TRANSMITTANCE {
                break;
            }
        }
        t
    }

    pub fn render(&self, background: &Vec3) -> ImageBuffer {
        let (w, h) = (self.cam.width, self.cam.height);
        let mut img = ImageBuffer::new(w, h);
        let mut alpha = vec![0.0; w * h];
        let rows: Vec<(Vec<f64>, Vec<f64>)> = self
            .bands
            .par_iter()
            .map(|band| {
                let mut rgb = vec![0.0; (band.y1 - band.y0) * w * 3];
                let mut acc = vec![0.0; (band.y1 - band.y0) * w];
                let mut contribs = Vec::new();
                for y in band.y0..band.y1 {
                    for x in 0..w {
                        let t_end = self.pixel_contributions(band, x, y, &mut contribs);
                        let mut c = Vec3::zeros();
                        for k in &contribs {
                            let (_, s, _) = &self.splats[band.splats[k.slot as usize] as usize];
                            c += s.color * (k.alpha_hat * k.transmittance);
                        }
                        c += background * t_end;
                        let li = (y - band.y0) * w + x;
                        rgb[li * 3..li * 3 + 3].copy_from_slice(c.as_slice());
                        acc[li] = 1.0 - t_end;
                    }
                }
                (rgb, acc)
            })
            .collect();
        for (band, (rgb, acc)) in self.bands.iter().zip(rows) {
            let start = band.y0 * w;
            img.rgb[start * 3..start * 3 + rgb.len()].copy_from_slice(&rgb);
            alpha[start..start + acc.len()].copy_from_slice(&acc);
        }
        img.alpha = Some(alpha);
        img
    }

    pub fn backward(&self, background: &Vec3, d_image: &ImageBuffer) -> Result<RenderGrads> {
        let (w, h) = (self.cam.width, self.cam.height);
        if d_image.dims() != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                got: d_image.dims(),
            });
        }
        let per_band: Vec<Vec<SplatGrad>> = self
            .bands
            .par_iter()
            .map(|band| {
                let mut grads = vec![SplatGrad::default(); band.splats.len()];
                let mut contribs = Vec::new();
                for y in band.y0..band.y1 {
                    for x in 0..w {
                        let pi = (y * w + x) * 3;
                        let d_c = Vec3::new(d_image.rgb[pi], d_image.rgb[pi + 1], d_image.rgb[pi + 2]);
                        if d_c == Vec3::zeros() {
                            continue;
                        }
                        let t_end = self.pixel_contributions(band, x, y, &mut contribs);
                        // colour of everything behind the current splat
                        let mut behind = background * t_end;
                        for k in contribs.iter().rev() {
                            let (_, s, _) = &self.splats[band.splats[k.slot as usize] as usize];
                            let g = &mut grads[k.slot as usize];
                            let weight = k.alpha_hat * k.transmittance;
                            for ch in 0..3 {
                                g.color[ch] += weight * d_c[ch];
                            }
                            let d_alpha_hat = (s.color * k.transmittance - behind / (1.0 - k.alpha_hat)).dot(&d_c);
                            behind += s.color * weight;
                            if k.clamped {
                                continue;
                            }
                            g.alpha += d_alpha_hat * k.gauss;
                            let d_power = d_alpha_hat * s.alpha * k.gauss;
                            let [dx, dy] = k.delta;
                            // power = -1/2 δᵀ Q δ with δ = pixel - mean
                            g.mean[0] += d_power * (s.conic[0] * dx + s.conic[1] * dy);
                            g.mean[1] += d_power * (s.conic[1] * dx + s.conic[2] * dy);
                            g.conic[0] += d_power * (-0.5 * dx * dx);
                            g.conic[1] += d_power * (-dx * dy);
                            g.conic[2] += d_power * (-0.5 * dy * dy);
                        }
                    }
                }
                grads
            })
            .collect();

        let mut splat_grads = vec![SplatGrad::default(); self.splats.len()];
        for (band, grads) in self.bands.iter().zip(&per_band) {
            for (slot, g) in grads.iter().enumerate() {
                splat_grads[band.splats[slot] as usize].add(g);
            }
        }

        let n = self.cloud.len();
        let mut out = RenderGrads::zeros(n);
        let (half_w, half_h) = (0.5 * w as f64, 0.5 * h as f64);
        for ((i, splat, proj), sg) in self.splats.iter().zip(&splat_grads) {
            out.visible[*i] = true;
            out.mean2d_grad_norm[*i] = (sg.mean[0] * half_w).hypot(sg.mean[1] * half_h);
            backprop_projection(&self.cloud.get(*i), self.cam, splat, proj, sg, &mut out.d, *i);
        }
        Ok(out)
    }

    /// Hash of every discrete decision in the forward pass: culling, which
    /// splats pass the alpha floor at each pixel and in what order, clamping,
    /// early termination and color clamping. Two parameter settings with the
    /// same fingerprint lie in the same smooth piece of the render function.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for (i, s, p) in &self.splats {
            i.hash(&mut hasher);
            for c in p.raw_color.iter() {
                (*c > 0.0).hash(&mut hasher);
            }
            (s.alpha * 255.0 > 1.0).hash(&mut hasher);
        }
        let mut contribs = Vec::new();
        for band in &self.bands {
            for y in band.y0..band.y1 {
                for x in 0..self.cam.width {
                    let t = self.pixel_contributions(band, x, y, &mut contribs);
                    for k in &contribs {
                        band.splats[k.slot as usize].hash(&mut hasher);
                        k.clamped.hash(&mut hasher);
                    }
                    (t < MIN_TRANSMITTANCE).hash(&mut hasher);
                }
            }
        }
        hasher.finish()
    }
}

pub fn render(cloud: &GaussianCloud, cam: &Camera, background: &Vec3) -> ImageBuffer {
    Prepared::new(cloud, cam).render(background)
}

/// Gradients of a scalar loss whose image-space gradient is `d_image`.
pub fn render_with_grad(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: &Vec3,
    d_image: &ImageBuffer,
) -> Result<RenderGrads> {
    Prepared::new(cloud, cam).backward(background, d_image)
}

/// See [`Prepared::fingerprint`].
pub fn render_fingerprint(cloud: &GaussianCloud, cam: &Camera) -> u64 {
    Prepared::new(cloud, cam).fingerprint()
}
