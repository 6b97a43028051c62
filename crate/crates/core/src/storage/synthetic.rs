//! Scripted multi-view scenes with exact ground truth.
//!
//! Each blob is a single Gaussian following a motion script. Cameras sit on a
//! ring looking at the origin. Images are produced by a brute-force renderer
//! written independently of the tiled rasterizer: it evaluates every blob at
//! every pixel and composites them with the same rules, so it doubles as an
//! oracle for [`crate::raster::render`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};
use crate::imagebuf::ImageBuffer;
use crate::math::{
    eval_sh, logit, quat_identity, quat_mul_raw, quat_normalize, quat_to_matrix, rgb_to_sh_dc, sigmoid,
    Mat3, Quat, Vec3, SH_LEN,
};
use crate::storage::dataset::{
    camera_file_name, frame_dir_name, write_png, CameraRecord, CamerasFile, FrameData, CAMERAS_FILE,
    SEEDS_FILE,
};
use crate::train::SeedPoint;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const SCENE_FILE: &str = "scene.json";

/// How one blob moves over time. Frame `t` is `t` steps from frame 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionScript {
    Static,
    /// Rigid translation by `velocity` per frame.
    Translate { velocity: [f64; 3] },
    /// Rigid rotation by `omega` radians per frame about `axis` through `pivot`.
    Rotate {
        axis: [f64; 3],
        omega: f64,
        #[serde(default)]
        pivot: [f64; 3],
    },
    /// Absent before `frame`, static from then on.
    Appear { frame: usize },
}

/// Everything that defines a synthetic dataset besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub blob_count: usize,
    pub camera_count: usize,
    pub camera_radius: f64,
    pub camera_height: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub fov_degrees: f64,
    pub frame_count: usize,
    pub test_camera_index: usize,
    /// Blob centers are drawn uniformly from a ball of this radius.
    pub scene_radius: f64,
    /// Range of per-axis standard deviations.
    pub blob_scale: [f64; 2],
    pub blob_opacity: [f64; 2],
    /// Amplitude of the random degree-1 color terms.
    pub view_dependence: f64,
    pub seeds_per_blob: usize,
    pub background: [f64; 3],
    /// Script for every blob not listed in `per_blob`.
    pub motion: MotionScript,
    /// Optional per-blob scripts; when non-empty, must have `blob_count` items.
    pub per_blob: Vec<MotionScript>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            blob_count: 20,
            camera_count: 8,
            camera_radius: 4.0,
            camera_height: 1.0,
            image_width: 64,
            image_height: 64,
            fov_degrees: 45.0,
            frame_count: 10,
            test_camera_index: 0,
            scene_radius: 1.0,
            blob_scale: [0.06, 0.18],
            blob_opacity: [0.6, 0.95],
            view_dependence: 0.0,
            seeds_per_blob: 5,
            background: [0.0; 3],
            motion: MotionScript::Static,
            per_blob: Vec::new(),
        }
    }
}

fn bad(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidSpec {
        field: field.into(),
        reason: reason.into(),
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blob_count == 0 {
            return Err(bad("blob_count", "must be >= 1"));
        }
        if self.camera_count < 2 {
            return Err(bad("camera_count", "must be >= 2"));
        }
        if self.test_camera_index >= self.camera_count {
            return Err(bad("test_camera_index", "must be < camera_count"));
        }
        if !(self.camera_radius > 0.0) {
            return Err(bad("camera_radius", "must be > 0"));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(bad("image_width", "image dimensions must be >= 1"));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return Err(bad("fov_degrees", "must lie in (0, 180)"));
        }
        if self.frame_count == 0 {
            return Err(bad("frame_count", "must be >= 1"));
        }
        if !(self.scene_radius >= 0.0) {
            return Err(bad("scene_radius", "must be >= 0"));
        }
        let [s0, s1] = self.blob_scale;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(bad("blob_scale", "need 0 < min <= max"));
        }
        let [o0, o1] = self.blob_opacity;
        if !(o0 > 0.0 && o0 <= o1 && o1 < 1.0) {
            return Err(bad("blob_opacity", "need 0 < min <= max < 1"));
        }
        if !self.per_blob.is_empty() && self.per_blob.len() != self.blob_count {
            return Err(bad("per_blob", format!("expected {} scripts, got {}", self.blob_count, self.per_blob.len())));
        }
        for script in std::iter::once(&self.motion).chain(&self.per_blob) {
            if let MotionScript::Rotate { axis, omega, .. } = script {
                if Vec3::from(*axis).norm() == 0.0 || !omega.is_finite() {
                    return Err(bad("motion", "rotation needs a nonzero axis and finite omega"));
                }
            }
        }
        Ok(())
    }

    pub fn script(&self, blob: usize) -> &MotionScript {
        self.per_blob.get(blob).unwrap_or(&self.motion)
    }

    /// Camera ring around the vertical axis, all looking at the origin.
    pub fn cameras(&self) -> Vec<Camera> {
        let f = 0.5 * self.image_width as f64 / (0.5 * self.fov_degrees.to_radians()).tan();
        (0..self.camera_count)
            .map(|i| {
                let theta = std::f64::consts::TAU * i as f64 / self.camera_count as f64;
                let eye = Vec3::new(
                    self.camera_radius * theta.cos(),
                    self.camera_radius * theta.sin(),
                    self.camera_height,
                );
                Camera::look_at(eye, Vec3::zeros(), Vec3::z(), f, f, self.image_width, self.image_height)
            })
            .collect()
    }
}

/// A blob's pose at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobPose {
    pub position: [f64; 3],
    /// `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub frame: usize,
    pub blobs: Vec<BlobPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frames: Vec<GroundTruthFrame>,
}

/// Blob `g` (its frame-0 state) moved to frame `t`, or `None` if not yet visible.
pub fn blob_at(g: &Gaussian, script: &MotionScript, t: usize) -> Option<Gaussian> {
    let tf = t as f64;
    match script {
        MotionScript::Static => Some(g.clone()),
        MotionScript::Translate { velocity } => Some(Gaussian {
            position: g.position + Vec3::from(*velocity) * tf,
            ..g.clone()
        }),
        MotionScript::Rotate { axis, omega, pivot } => {
            let a = Vec3::from(*axis).normalize();
            let half = 0.5 * omega * tf;
            let q = Quat::new(half.cos(), a.x * half.sin(), a.y * half.sin(), a.z * half.sin());
            let pivot = Vec3::from(*pivot);
            Some(Gaussian {
                position: quat_to_matrix(&q) * (g.position - pivot) + pivot,
                rotation: quat_mul_raw(&q, &g.rotation),
                ..g.clone()
            })
        }
        MotionScript::Appear { frame } => (t >= *frame).then(|| g.clone()),
    }
}

/// Brute-force reference renderer: every Gaussian at every pixel center,
/// depth-sorted compositing with the same alpha rules as the rasterizer.
pub fn oracle_render(gaussians: &[Gaussian], cam: &Camera, background: &Vec3) -> ImageBuffer {
    struct Footprint {
        depth: f64,
        u: f64,
        v: f64,
        inv: [f64; 3],
        opacity: f64,
        color: Vec3,
    }
    let center = cam.center();
    let mut prints: Vec<(usize, Footprint)> = Vec::new();
    for (idx, g) in gaussians.iter().enumerate() {
        let t = cam.rotation * g.position + cam.translation;
        if t.z <= cam.near {
            continue;
        }
        let opacity = sigmoid(g.opacity_logit);
        if opacity * 255.0 <= 1.0 {
            continue;
        }
        let u = cam.fx * t.x / t.z + cam.cx;
        let v = cam.fy * t.y / t.z + cam.cy;
        let w = cam.width as f64;
        let h = cam.height as f64;
        let dx = (-u).max(u - w).max(0.0);
        let dy = (-v).max(v - h).max(0.0);
        if (dx * dx + dy * dy).sqrt() > crate::raster::OFFSCREEN_CULL * (w * w + h * h).sqrt() {
            continue;
        }
        // rotation and scale of the Gaussian in camera coordinates
        let r = quat_to_matrix(&quat_normalize(&g.rotation).unwrap_or_else(|_| quat_identity()));
        let s = g.log_scale.map(f64::exp);
        let a = cam.rotation * r * Mat3::from_diagonal(&s);
        let cov_cam = a * a.transpose();
        let jac = [
            [cam.fx / t.z, 0.0, -cam.fx * t.x / (t.z * t.z)],
            [0.0, cam.fy / t.z, -cam.fy * t.y / (t.z * t.z)],
        ];
        let mut c2 = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..3 {
                    for q in 0..3 {
                        acc += jac[i][p] * cov_cam[(p, q)] * jac[j][q];
                    }
                }
                c2[i][j] = acc;
            }
        }
        let (sxx, sxy, syy) = (c2[0][0] + 0.3, 0.5 * (c2[0][1] + c2[1][0]), c2[1][1] + 0.3);
        let det = sxx * syy - sxy * sxy;
        if det <= 0.0 {
            continue;
        }
        let dir = (g.position - center).normalize();
        prints.push((
            idx,
            Footprint {
                depth: t.z,
                u,
                v,
                inv: [syy / det, -sxy / det, sxx / det],
                opacity,
                color: eval_sh(&g.sh, &dir),
            },
        ));
    }
    prints.sort_by(|a, b| a.1.depth.partial_cmp(&b.1.depth).unwrap().then(a.0.cmp(&b.0)));

    let mut img = ImageBuffer::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0;
            let mut color = Vec3::zeros();
            for (_, f) in &prints {
                let (dx, dy) = (px - f.u, py - f.v);
                let m = f.inv[0] * dx * dx + 2.0 * f.inv[1] * dx * dy + f.inv[2] * dy * dy;
                let alpha = (f.opacity * (-0.5 * m).exp()).min(0.99);
                if alpha < 1.0 / 255.0 {
                    continue;
                }
                color += f.color * (alpha * trans);
                trans *= 1.0 - alpha;
                if trans < 1e-4 {
                    break;
                }
            }
            img.set_pixel(x, y, color + background * trans);
        }
    }
    img
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub cameras: Vec<Camera>,
    /// Frame-0 state of every blob (including ones that appear later).
    pub blobs: Vec<Gaussian>,
    /// `images[frame][camera]`, already quantized to 8 bits.
    pub images: Vec<Vec<ImageBuffer>>,
    pub ground_truth: GroundTruth,
    pub seeds: Vec<SeedPoint>,
}

fn random_blob(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Gaussian, [f64; 3]) {
    // uniform in the ball by rejection
    let position = loop {
        let p = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if p.norm() <= 1.0 {
            break p * spec.scene_radius;
        }
    };
    let [s0, s1] = spec.blob_scale;
    let log_scale = Vec3::new(
        rng.random_range(s0.ln()..=s1.ln()),
        rng.random_range(s0.ln()..=s1.ln()),
        rng.random_range(s0.ln()..=s1.ln()),
    );
    let q = Quat::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    let rotation = quat_normalize(&q).unwrap_or_else(|_| quat_identity());
    let [o0, o1] = spec.blob_opacity;
    let opacity = rng.random_range(o0..=o1);
    let color = [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ];
    let mut sh = [0.0; SH_LEN];
    for ch in 0..3 {
        sh[ch] = rgb_to_sh_dc(color[ch]);
    }
    for v in sh[3..].iter_mut() {
        *v = spec.view_dependence * rng.random_range(-1.0..1.0);
    }
    (
        Gaussian {
            position,
            log_scale,
            rotation,
            opacity_logit: logit(opacity),
            sh,
        },
        color,
    )
}

impl SyntheticDataset {
    pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cameras = spec.cameras();
        let mut blobs = Vec::with_capacity(spec.blob_count);
        let mut colors = Vec::with_capacity(spec.blob_count);
        for _ in 0..spec.blob_count {
            let (g, c) = random_blob(spec, &mut rng);
            blobs.push(g);
            colors.push(c);
        }

        let mut seeds = Vec::new();
        for (b, g) in blobs.iter().enumerate() {
            if blob_at(g, spec.script(b), 0).is_none() {
                continue;
            }
            let r = quat_to_matrix(&g.rotation);
            let s = g.scale();
            for _ in 0..spec.seeds_per_blob {
                let z = Vec3::new(
                    rng.sample::<f64, _>(StandardNormal) * s.x,
                    rng.sample::<f64, _>(StandardNormal) * s.y,
                    rng.sample::<f64, _>(StandardNormal) * s.z,
                );
                let p = g.position + r * z;
                seeds.push(SeedPoint {
                    position: [p.x, p.y, p.z],
                    color: colors[b],
                });
            }
        }

        let bg = Vec3::from(spec.background);
        let mut images = Vec::with_capacity(spec.frame_count);
        let mut gt_frames = Vec::with_capacity(spec.frame_count);
        for t in 0..spec.frame_count {
            let posed: Vec<Option<Gaussian>> = blobs
                .iter()
                .enumerate()
                .map(|(b, g)| blob_at(g, spec.script(b), t))
                .collect();
            let visible: Vec<Gaussian> = posed.iter().flatten().cloned().collect();
            images.push(
                cameras
                    .iter()
                    .map(|cam| {
                        let img = oracle_render(&visible, cam, &bg);
                        ImageBuffer::from_rgb8(img.width, img.height, &img.to_rgb8())
                    })
                    .collect(),
            );
            gt_frames.push(GroundTruthFrame {
                frame: t,
                blobs: posed
                    .iter()
                    .zip(&blobs)
                    .map(|(p, g0)| {
                        let g = p.as_ref().unwrap_or(g0);
                        BlobPose {
                            position: [g.position.x, g.position.y, g.position.z],
                            rotation: [g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]],
                            visible: p.is_some(),
                        }
                    })
                    .collect(),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            seed,
            cameras,
            blobs,
            images,
            ground_truth: GroundTruth { frames: gt_frames },
            seeds,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.images.len()
    }

    /// Blobs visible at frame `t`, as a cloud.
    pub fn cloud_at(&self, t: usize) -> GaussianCloud {
        GaussianCloud::from_gaussians(
            self.blobs
                .iter()
                .enumerate()
                .filter_map(|(b, g)| blob_at(g, self.spec.script(b), t)),
        )
    }

    pub fn frame(&self, t: usize) -> FrameData {
        let ti = self.spec.test_camera_index;
        let train = self
            .cameras
            .iter()
            .zip(&self.images[t])
            .enumerate()
            .filter(|(i, _)| *i != ti)
            .map(|(_, (c, img))| (c.clone(), img.clone()))
            .collect();
        FrameData::new(t, train, (self.cameras[ti].clone(), self.images[t][ti].clone()))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let cams = CamerasFile {
            test_camera_index: self.spec.test_camera_index,
            cameras: self.cameras.iter().map(CameraRecord::from_camera).collect(),
        };
        std::fs::write(dir.join(CAMERAS_FILE), serde_json::to_vec_pretty(&cams)?)?;
        std::fs::write(dir.join(SEEDS_FILE), serde_json::to_vec_pretty(&self.seeds)?)?;
        std::fs::write(dir.join(GROUND_TRUTH_FILE), serde_json::to_vec_pretty(&self.ground_truth)?)?;
        std::fs::write(dir.join(SCENE_FILE), serde_json::to_vec_pretty(&self.spec)?)?;
        for (t, frame) in self.images.iter().enumerate() {
            let fdir = dir.join(frame_dir_name(t));
            std::fs::create_dir_all(&fdir)?;
            for (c, img) in frame.iter().enumerate() {
                write_png(&fdir.join(camera_file_name(c)), img)?;
            }
        }
        Ok(())
    }
}

/// Generates the dataset for `spec` and `seed` and writes it under `out`.
pub fn generate_synthetic(spec: &SceneSpec, seed: u64, out: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let ds = SyntheticDataset::generate(spec, seed)?;
    ds.write(out)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::render;
    use crate::storage::dataset::load_dataset;

    fn tiny_spec() -> SceneSpec {
        SceneSpec {
            blob_count: 6,
            camera_count: 4,
            image_width: 24,
            image_height: 20,
            frame_count: 3,
            test_camera_index: 2,
            motion: MotionScript::Translate {
                velocity: [0.05, 0.0, -0.02],
            },
            ..Default::default()
        }
    }

    #[test]
    fn translate_script_is_exact_in_ground_truth() {
        let ds = SyntheticDataset::generate(&tiny_spec(), 3).unwrap();
        for (t, frame) in ds.ground_truth.frames.iter().enumerate() {
            for (b, pose) in frame.blobs.iter().enumerate() {
                let expect = ds.blobs[b].position + Vec3::new(0.05, 0.0, -0.02) * t as f64;
                assert_eq!(Vec3::from(pose.position), expect);
            }
        }
    }

    #[test]
    fn appear_and_rotate_scripts() {
        let g = Gaussian {
            position: Vec3::new(1.0, 0.0, 0.0),
            ..Default::default()
        };
        assert!(blob_at(&g, &MotionScript::Appear { frame: 2 }, 1).is_none());
        assert_eq!(blob_at(&g, &MotionScript::Appear { frame: 2 }, 2), Some(g.clone()));
        let rot = MotionScript::Rotate {
            axis: [0.0, 0.0, 1.0],
            omega: std::f64::consts::FRAC_PI_2,
            pivot: [0.0; 3],
        };
        let moved = blob_at(&g, &rot, 1).unwrap();
        assert!((moved.position - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn oracle_matches_rasterizer() {
        let ds = SyntheticDataset::generate(&tiny_spec(), 4).unwrap();
        let cloud = ds.cloud_at(0);
        let blobs: Vec<Gaussian> = cloud.iter().collect();
        for cam in &ds.cameras {
            let a = oracle_render(&blobs, cam, &Vec3::zeros());
            let b = render(&cloud, cam, &Vec3::zeros());
            assert!(a.mean_abs_diff(&b).unwrap() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_bytes_and_loader_round_trip() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny_spec(), 7, a.path()).unwrap();
        generate_synthetic(&tiny_spec(), 7, b.path()).unwrap();
        for name in [CAMERAS_FILE, SEEDS_FILE, GROUND_TRUTH_FILE, "frame_000002/cam_03.png"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded.frame_count, 3);
        assert_eq!(loaded.train_camera_indices(), vec![0, 1, 3]);
        for (c, orig) in loaded.cameras.iter().zip(&ds.cameras) {
            assert_eq!(c.world_to_cam_row_major(), orig.world_to_cam_row_major());
            assert_eq!((c.fx, c.fy, c.cx, c.cy), (orig.fx, orig.fy, orig.cx, orig.cy));
        }
        let f = loaded.load_frame(1).unwrap();
        let mem = ds.frame(1);
        assert_eq!(f.test.1, mem.test.1);
        assert_eq!(f.train.len(), 3);
        for (x, y) in f.train.iter().zip(&mem.train) {
            assert_eq!(x.1, y.1);
        }
        assert_eq!(loaded.seed_points().unwrap(), ds.seeds);
    }

    #[test]
    fn missing_frame_is_named() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&tiny_spec(), 1, dir.path()).unwrap();
        std::fs::remove_dir_all(dir.path().join("frame_000001")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("frame_000001")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prefetch_bounds_residency() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            frame_count: 9,
            ..tiny_spec()
        };
        generate_synthetic(&spec, 2, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let k = 2;
        let mut it = ds.frames(0, k);
        let mut seen = 0;
        loop {
            let group: Vec<FrameData> = it.by_ref().take(k).map(|f| f.unwrap()).collect();
            if group.is_empty() {
                break;
            }
            std::thread::sleep(std::time::Duration::from_millis(20));
            seen += group.len();
        }
        assert_eq!(seen, 9);
        assert!(ds.residency().peak() <= 2 * k, "peak {}", ds.residency().peak());
    }

    #[test]
    fn bad_spec_names_field() {
        let spec = SceneSpec {
            blob_opacity: [0.5, 1.5],
            ..Default::default()
        };
        match SyntheticDataset::generate(&spec, 0) {
            Err(Error::InvalidSpec { field, .. }) => assert_eq!(field, "blob_opacity"),
            other => panic!("{other:?}"),
        }
    }
}
