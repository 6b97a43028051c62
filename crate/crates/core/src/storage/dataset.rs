//! Multi-view frame datasets on disk.
//!
//! ```text
//! root/cameras.json
//! root/seed_points.json          (optional)
//! root/frame_000000/cam_00.png
//! root/frame_000000/cam_01.png
//! ...
//! ```

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, DEFAULT_NEAR};
use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;
use crate::train::{SeedPoint, View};

pub const CAMERAS_FILE: &str = "cameras.json";
pub const SEEDS_FILE: &str = "seed_points.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    /// Row-major 4×4.
    pub world_to_cam: Vec<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRecord {
    pub fn from_camera(cam: &Camera) -> Self {
        Self {
            world_to_cam: cam.world_to_cam_row_major().to_vec(),
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let m: [f64; 16] = self.world_to_cam.as_slice().try_into().map_err(|_| Error::InvalidSpec {
            field: "world_to_cam".into(),
            reason: format!("expected 16 values, got {}", self.world_to_cam.len()),
        })?;
        Camera::from_world_to_cam(&m, self.fx, self.fy, self.cx, self.cy, self.width, self.height, DEFAULT_NEAR)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamerasFile {
    pub test_camera_index: usize,
    pub cameras: Vec<CameraRecord>,
}

pub fn frame_dir_name(index: usize) -> String {
    format!("frame_{index:06}")
}

pub fn camera_file_name(cam: usize) -> String {
    format!("cam_{cam:02}.png")
}

/// Counts frames currently decoded in memory and the peak.
#[derive(Debug, Default)]
pub struct Residency {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl Residency {
    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

#[derive(Debug)]
struct ResidencyToken(Arc<Residency>);

impl ResidencyToken {
    fn new(r: &Arc<Residency>) -> Self {
        let now = r.current.fetch_add(1, Ordering::SeqCst) + 1;
        r.peak.fetch_max(now, Ordering::SeqCst);
        Self(r.clone())
    }
}

impl Drop for ResidencyToken {
    fn drop(&mut self) {
        self.0.current.fetch_sub(1, Ordering::SeqCst);
    }
}

/// All views of one time step, split into training views and the held-out
/// test view.
#[derive(Debug)]
pub struct FrameData {
    pub index: usize,
    pub train: Vec<View>,
    pub test: View,
    _token: Option<ResidencyToken>,
}

impl FrameData {
    pub fn new(index: usize, train: Vec<View>, test: View) -> Self {
        Self {
            index,
            train,
            test,
            _token: None,
        }
    }
}

/// An opened dataset directory. Images are read lazily per frame.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub cameras: Vec<Camera>,
    pub test_camera_index: usize,
    pub frame_count: usize,
    residency: Arc<Residency>,
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::open(root)
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let cam_path = root.join(CAMERAS_FILE);
        if !cam_path.is_file() {
            return Err(Error::MissingFile(cam_path));
        }
        let file: CamerasFile = serde_json::from_slice(&std::fs::read(&cam_path)?)?;
        if file.cameras.is_empty() {
            return Err(Error::InvalidSpec {
                field: "cameras".into(),
                reason: "no cameras".into(),
            });
        }
        if file.test_camera_index >= file.cameras.len() {
            return Err(Error::InvalidSpec {
                field: "test_camera_index".into(),
                reason: format!("{} out of range for {} cameras", file.test_camera_index, file.cameras.len()),
            });
        }
        let cameras = file.cameras.iter().map(CameraRecord::to_camera).collect::<Result<Vec<_>>>()?;

        let mut indices = Vec::new();
        for entry in std::fs::read_dir(&root)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(num) = name.strip_prefix("frame_") {
                if num.len() == 6 {
                    if let Ok(i) = num.parse::<usize>() {
                        indices.push(i);
                    }
                }
            }
        }
        indices.sort_unstable();
        for (expect, &got) in indices.iter().enumerate() {
            if expect != got {
                return Err(Error::MissingFile(root.join(frame_dir_name(expect))));
            }
        }
        if indices.is_empty() {
            return Err(Error::MissingFile(root.join(frame_dir_name(0))));
        }
        Ok(Self {
            root,
            cameras,
            test_camera_index: file.test_camera_index,
            frame_count: indices.len(),
            residency: Arc::new(Residency::default()),
        })
    }

    pub fn train_camera_indices(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&i| i != self.test_camera_index).collect()
    }

    pub fn residency(&self) -> &Arc<Residency> {
        &self.residency
    }

    pub fn seed_points(&self) -> Result<Vec<SeedPoint>> {
        let path = self.root.join(SEEDS_FILE);
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn load_image(&self, frame: usize, cam: usize) -> Result<ImageBuffer> {
        let path = self.root.join(frame_dir_name(frame)).join(camera_file_name(cam));
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let img = image::open(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        let c = &self.cameras[cam];
        let (w, h) = (img.width() as usize, img.height() as usize);
        if (w, h) != (c.width, c.height) {
            return Err(Error::DimensionMismatch {
                expected: (c.width, c.height),
                got: (w, h),
            });
        }
        Ok(ImageBuffer::from_rgb8(w, h, img.as_raw()))
    }

    pub fn load_frame(&self, index: usize) -> Result<FrameData> {
        if index >= self.frame_count {
            return Err(Error::InvalidArgument(format!(
                "frame {index} out of range (dataset has {})",
                self.frame_count
            )));
        }
        let token = ResidencyToken::new(&self.residency);
        let mut train = Vec::new();
        let mut test = None;
        for (ci, cam) in self.cameras.iter().enumerate() {
            let img = self.load_image(index, ci)?;
            if ci == self.test_camera_index {
                test = Some((cam.clone(), img));
            } else {
                train.push((cam.clone(), img));
            }
        }
        Ok(FrameData {
            index,
            train,
            test: test.expect("test index validated on open"),
            _token: Some(token),
        })
    }

    /// Frames `start..frame_count` in order, read ahead on a background
    /// thread. At most `2·k` frames are decoded at once when the consumer holds
    /// at most `k`.
    pub fn frames(&self, start: usize, k: usize) -> Prefetch {
        let (tx, rx) = mpsc::sync_channel(k.max(1) - 1);
        let ds = self.clone();
        let handle = std::thread::spawn(move || {
            for i in start..ds.frame_count {
                let res = ds.load_frame(i);
                let failed = res.is_err();
                if tx.send(res).is_err() || failed {
                    break;
                }
            }
        });
        Prefetch {
            rx,
            handle: Some(handle),
        }
    }
}

/// Iterator over prefetched frames.
pub struct Prefetch {
    rx: mpsc::Receiver<Result<FrameData>>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl Iterator for Prefetch {
    type Item = Result<FrameData>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.rx.recv() {
            Ok(item) => Some(item),
            Err(_) => {
                if let Some(h) = self.handle.take() {
                    let _ = h.join();
                }
                None
            }
        }
    }
}

pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    image::save_buffer(
        path,
        &img.to_rgb8(),
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
