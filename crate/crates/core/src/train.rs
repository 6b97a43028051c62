//! Initial-frame reconstruction: position-perturbed training with clone,
//! split and opacity-prune density control.

use kiddo::{KdTree, SquaredEuclidean};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};
use crate::imagebuf::ImageBuffer;
use crate::loss::{combined_loss, LossValue};
use crate::math::{logit, quat_identity, quat_normalize, quat_to_matrix, rgb_to_sh_dc, Vec3, SH_LEN};
use crate::optim::{AdamParams, CloudAdam};
use crate::raster::{Prepared, RenderGrads};

pub const INITIAL_OPACITY: f64 = 0.1;

/// A colored point used to seed the initial cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedPoint {
    pub position: [f64; 3],
    pub color: [f64; 3],
}

/// A calibrated view and its ground-truth image.
pub type View = (Camera, ImageBuffer);

/// Rows appended (zero-initialized or copied) and then filtered; applied in
/// that order to the cloud and everything shaped like it.
#[derive(Debug, Clone, PartialEq)]
pub struct RowEdit {
    pub appended: usize,
    /// Mask over `old_len + appended` rows.
    pub keep: Vec<bool>,
}

impl RowEdit {
    pub fn identity(n: usize) -> Self {
        Self {
            appended: 0,
            keep: vec![true; n],
        }
    }

    pub fn apply_to_adam(&self, adam: &mut CloudAdam) {
        adam.extend(self.appended);
        adam.retain_mask(&self.keep);
    }
}

/// Running per-Gaussian 2D positional gradient norms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradAccum {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradAccum {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Adds the norms of Gaussians visible in this pass.
    pub fn add(&mut self, grads: &RenderGrads) {
        for i in 0..self.sum.len() {
            if grads.visible[i] {
                self.sum[i] += grads.mean2d_grad_norm[i];
                self.count[i] += 1;
            }
        }
    }

    /// Mean norm per Gaussian over the passes in which it was visible.
    pub fn mean(&self) -> Vec<f64> {
        self.sum
            .iter()
            .zip(&self.count)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }
}

/// Returns `μ + λ·ε` with fresh standard-normal `ε` per component; the
/// cloud itself is not modified.
pub fn perturb_positions(cloud: &GaussianCloud, lambda_noise: f64, rng: &mut impl Rng) -> Vec<Vec3> {
    if lambda_noise == 0.0 {
        return cloud.positions.clone();
    }
    cloud
        .positions
        .iter()
        .map(|p| {
            let e = Vec3::new(
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            );
            p + e * lambda_noise
        })
        .collect()
}

/// Duplicates every small, high-gradient Gaussian (copies appended at the end).
pub fn densify_clone(
    cloud: &mut GaussianCloud,
    mean_grads: &[f64],
    threshold: f64,
    small_cutoff: f64,
) -> RowEdit {
    let n = cloud.len();
    let picks: Vec<usize> = (0..n)
        .filter(|&i| mean_grads[i] > threshold && cloud.max_scale(i) <= small_cutoff)
        .collect();
    cloud.extend_from(&cloud.select(&picks));
    RowEdit {
        appended: picks.len(),
        keep: vec![true; n + picks.len()],
    }
}

/// Replaces every large, high-gradient Gaussian with two children drawn from
/// its own distribution and shrunk by `scale_divisor`. Does nothing once
/// `step` passes `split_stop_step`.
#[allow(clippy::too_many_arguments)]
pub fn densify_split(
    cloud: &mut GaussianCloud,
    mean_grads: &[f64],
    threshold: f64,
    small_cutoff: f64,
    step: usize,
    split_stop_step: usize,
    scale_divisor: f64,
    rng: &mut impl Rng,
) -> RowEdit {
    let n = cloud.len();
    if step > split_stop_step {
        return RowEdit::identity(n);
    }
    let parents: Vec<usize> = (0..n)
        .filter(|&i| mean_grads.get(i).is_some_and(|&g| g > threshold) && cloud.max_scale(i) > small_cutoff)
        .collect();
    let shrink = scale_divisor.ln();
    for &i in &parents {
        let parent = cloud.get(i);
        let rot = quat_to_matrix(&quat_normalize(&parent.rotation).unwrap_or_else(|_| quat_identity()));
        let scale = parent.scale();
        for _ in 0..2 {
            let z = Vec3::new(
                rng.sample::<f64, _>(StandardNormal) * scale.x,
                rng.sample::<f64, _>(StandardNormal) * scale.y,
                rng.sample::<f64, _>(StandardNormal) * scale.z,
            );
            cloud.push(Gaussian {
                position: parent.position + rot * z,
                log_scale: parent.log_scale.map(|s| s - shrink),
                ..parent.clone()
            });
        }
    }
    let mut keep = vec![true; n + 2 * parents.len()];
    for &i in &parents {
        keep[i] = false;
    }
    cloud.retain_mask(&keep);
    RowEdit {
        appended: 2 * parents.len(),
        keep,
    }
}

/// Removes Gaussians with opacity below `threshold`, preserving order.
pub fn prune_by_opacity(cloud: &mut GaussianCloud, threshold: f64) -> RowEdit {
    let keep: Vec<bool> = (0..cloud.len()).map(|i| cloud.opacity(i) >= threshold).collect();
    cloud.retain_mask(&keep);
    RowEdit { appended: 0, keep }
}

/// Radius of the camera rig: 1.1 × the largest camera-center distance from
/// the centroid of all centers. Used to scale position step sizes and the
/// small-Gaussian cutoff.
pub fn scene_extent(cameras: &[&Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vec3> = cameras.iter().map(|c| c.center()).collect();
    let centroid = centers.iter().sum::<Vec3>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - centroid).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// One Gaussian per seed: isotropic scale from the mean distance to the three
/// nearest other seeds, identity rotation, opacity 0.1, DC color from the seed.
pub fn initialize_cloud(seeds: &[SeedPoint], fallback_scale: f64) -> Result<GaussianCloud> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seed points".into()));
    }
    let pts: Vec<[f64; 3]> = seeds.iter().map(|s| s.position).collect();
    let tree: KdTree<f64, 3> = (&pts).into();
    let k = 3.min(seeds.len() - 1);
    let mut cloud = GaussianCloud::new();
    for s in seeds {
        let scale = if k == 0 {
            fallback_scale
        } else {
            let nn = tree.nearest_n::<SquaredEuclidean>(&s.position, k + 1);
            // the query point itself comes back at distance zero
            let d: f64 = nn.iter().skip(1).map(|n| n.distance.sqrt()).sum::<f64>() / k as f64;
            if d > 0.0 {
                d
            } else {
                fallback_scale
            }
        };
        let mut sh = [0.0; SH_LEN];
        for ch in 0..3 {
            sh[ch] = rgb_to_sh_dc(s.color[ch]);
        }
        cloud.push(Gaussian {
            position: Vec3::from(s.position),
            log_scale: Vec3::repeat(scale.max(1e-7).ln()),
            rotation: quat_identity(),
            opacity_logit: logit(INITIAL_OPACITY),
            sh,
        });
    }
    cloud.quantize_f32();
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Stepwise initial trainer; [`train_initial`] runs it to completion.
pub struct Trainer<'a> {
    views: &'a [View],
    cfg: TrainConfig,
    cloud: GaussianCloud,
    adam: CloudAdam,
    accum: GradAccum,
    rng: ChaCha8Rng,
    step: usize,
    extent: f64,
    densify: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(views: &'a [View], seeds: &[SeedPoint], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if views.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "initial training needs at least 2 views, got {}",
                views.len()
            )));
        }
        let extent = scene_extent(&views.iter().map(|(c, _)| c).collect::<Vec<_>>());
        let cloud = initialize_cloud(seeds, 0.01 * extent)?;
        let adam = CloudAdam::new(
            cloud.len(),
            AdamParams {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
            },
        );
        Ok(Self {
            views,
            cfg: cfg.clone(),
            accum: GradAccum::new(cloud.len()),
            cloud,
            adam,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            extent,
            densify: true,
        })
    }

    /// Turns density control on or off (on by default).
    pub fn set_densify(&mut self, enabled: bool) {
        self.densify = enabled;
    }

    pub fn cloud(&self) -> &GaussianCloud {
        &self.cloud
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn learning_rates(&self) -> [f64; 5] {
        let lr = &self.cfg.lr;
        [
            lr.decayed(lr.position * self.extent, self.step, self.cfg.init_steps),
            lr.log_scale,
            lr.rotation,
            lr.opacity,
            lr.sh,
        ]
    }

    /// One optimization step on the next view in round-robin order.
    pub fn step(&mut self) -> Result<LossValue> {
        let (cam, target) = &self.views[self.step % self.views.len()];
        let mut noisy = self.cloud.clone();
        noisy.positions = perturb_positions(&self.cloud, self.cfg.lambda_noise, &mut self.rng);
        let bg = Vec3::from(self.cfg.background);
        let prepared = Prepared::new(&noisy, cam);
        let img = prepared.render(&bg);
        let (loss, d_img) = combined_loss(&img, target, self.cfg.lambda_dssim)?;
        let grads = prepared.backward(&bg, &d_img)?;
        let lrs = self.learning_rates();
        self.adam.step(&mut self.cloud, &grads.d, &lrs);
        self.accum.add(&grads);
        self.step += 1;
        if self.densify
            && self.step >= self.cfg.densify_start_step
            && self.step.is_multiple_of(self.cfg.init_densify_interval)
        {
            self.densify_now();
        }
        Ok(loss)
    }

    /// Clone, split and prune using the gradients accumulated since the last
    /// event, then reset the accumulator. Past `split_stop_step` only pruning
    /// runs.
    pub fn densify_now(&mut self) -> DensifyReport {
        let cutoff = self.cfg.small_gaussian_fraction * self.extent;
        let thr = self.cfg.grad_clone_threshold;
        let mut grads = self.accum.mean();
        let clone = if self.step > self.cfg.split_stop_step {
            RowEdit::identity(self.cloud.len())
        } else {
            densify_clone(&mut self.cloud, &grads, thr, cutoff)
        };
        clone.apply_to_adam(&mut self.adam);
        // fresh copies carry no gradient history and are never split
        grads.extend(std::iter::repeat_n(0.0, clone.appended));
        let split = densify_split(
            &mut self.cloud,
            &grads,
            thr,
            cutoff,
            self.step,
            self.cfg.split_stop_step,
            self.cfg.split_scale_divisor,
            &mut self.rng,
        );
        split.apply_to_adam(&mut self.adam);
        let prune = prune_by_opacity(&mut self.cloud, self.cfg.prune_opacity_threshold);
        prune.apply_to_adam(&mut self.adam);
        self.accum = GradAccum::new(self.cloud.len());
        DensifyReport {
            cloned: clone.appended,
            split: split.appended / 2,
            pruned: prune.keep.iter().filter(|k| !**k).count(),
        }
    }

    /// Final cloud rounded to the precision of the checkpoint format.
    pub fn into_cloud(self) -> GaussianCloud {
        self.cloud.quantized_f32()
    }
}

/// Trains the initial representation for `cfg.init_steps` steps.
pub fn train_initial(views: &[View], seeds: &[SeedPoint], cfg: &TrainConfig) -> Result<GaussianCloud> {
    let mut trainer = Trainer::new(views, seeds, cfg)?;
    for _ in 0..cfg.init_steps {
        trainer.step()?;
    }
    log::info!(
        "initial training: {} steps, {} gaussians",
        cfg.init_steps,
        trainer.cloud().len()
    );
    Ok(trainer.into_cloud())
}
