//! Hierarchical region motion.
//!
//! The scene box is cut into cubic regions at `L` levels, each level's edge
//! twice the previous one. Every occupied region carries one translation
//! delta and one quaternion delta; a Gaussian moves by the sum of the deltas
//! of the regions containing it, one per level. Only occupied regions have
//! entries, so the parameter count follows the cloud, not the grid volume.

use std::collections::BTreeMap;

use crate::camera::Camera;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, SceneBounds};
use crate::imagebuf::ImageBuffer;
use crate::loss::combined_loss;
use crate::math::{
    normalize_vjp, quat_identity, quat_mul_raw, region_of, right_mul_matrix, Quat, Vec3,
};
use crate::optim::{AdamParams, Moments};
use crate::raster::{Prepared, RenderGrads};
use crate::train::GradAccum;

/// Below this norm a summed quaternion delta is treated as no rotation.
pub const MIN_DELTA_QUAT_NORM: f64 = 1e-8;
/// Scalars per region entry.
pub const PARAMS_PER_REGION: usize = 7;

pub type RegionKey = [i32; 3];

/// Translation and rotation delta of one region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParam {
    pub d_mu: Vec3,
    pub d_q: Quat,
}

impl MotionParam {
    pub fn identity() -> Self {
        Self {
            d_mu: Vec3::zeros(),
            d_q: quat_identity(),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn quantize_f32(&mut self) {
        self.d_mu.iter_mut().for_each(|v| *v = *v as f32 as f64);
        self.d_q.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

impl Default for MotionParam {
    fn default() -> Self {
        Self::identity()
    }
}

/// One level of the hierarchy: a sparse map from region coordinate to delta.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    /// 1 is the finest level.
    pub level: usize,
    pub edge: f64,
    pub entries: BTreeMap<RegionKey, MotionParam>,
}

/// All levels plus each Gaussian's region at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    /// Fine to coarse.
    pub grids: Vec<RegionGrid>,
    /// `assignments[level][gaussian]`.
    pub assignments: Vec<Vec<RegionKey>>,
}

/// Region edges for `n` Gaussians: the finest level targets `ceil(n / m)`
/// regions over the box volume, and each coarser level doubles the edge.
/// Edges are rounded to `f32` so they survive serialization unchanged.
pub fn level_edges(n: usize, bounds: &SceneBounds, m: usize, levels: usize) -> Result<Vec<f64>> {
    if m == 0 || levels == 0 {
        return Err(Error::InvalidArgument("m and L must be >= 1".into()));
    }
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    if !bounds.is_valid() || !(bounds.volume() > 0.0) {
        return Err(Error::DegenerateBounds);
    }
    let target = n.div_ceil(m) as f64;
    let e1 = (bounds.volume() / target).cbrt() as f32 as f64;
    if !(e1 > 0.0) || !e1.is_finite() {
        return Err(Error::DegenerateBounds);
    }
    Ok((0..levels).map(|l| e1 * f64::powi(2.0, l as i32)).collect())
}

pub fn build_motion_field(
    cloud: &GaussianCloud,
    bounds: &SceneBounds,
    m: usize,
    levels: usize,
) -> Result<MotionField> {
    let edges = level_edges(cloud.len(), bounds, m, levels)?;
    Ok(MotionField::assign(cloud, &edges))
}

impl MotionField {
    /// Identity field over the regions `cloud` occupies at the given edges.
    pub fn assign(cloud: &GaussianCloud, edges: &[f64]) -> Self {
        let mut grids = Vec::with_capacity(edges.len());
        let mut assignments = Vec::with_capacity(edges.len());
        for (l, &edge) in edges.iter().enumerate() {
            let keys: Vec<RegionKey> = cloud.positions.iter().map(|p| region_of(p, edge)).collect();
            let entries = keys.iter().map(|k| (*k, MotionParam::identity())).collect();
            grids.push(RegionGrid {
                level: l + 1,
                edge,
                entries,
            });
            assignments.push(keys);
        }
        Self { grids, assignments }
    }

    /// Field with the given entries whose assignments come from `cloud`. Used
    /// when replaying a decoded delta. Regions the cloud occupies but the
    /// grids lack are filled with identity.
    pub fn from_grids(cloud: &GaussianCloud, grids: Vec<RegionGrid>) -> Self {
        let edges: Vec<f64> = grids.iter().map(|g| g.edge).collect();
        let mut field = Self::assign(cloud, &edges);
        field.inherit(&MotionField {
            grids,
            assignments: Vec::new(),
        });
        field
    }

    pub fn levels(&self) -> usize {
        self.grids.len()
    }

    pub fn edges(&self) -> Vec<f64> {
        self.grids.iter().map(|g| g.edge).collect()
    }

    pub fn gaussian_count(&self) -> usize {
        self.assignments.first().map_or(0, Vec::len)
    }

    pub fn entry_count(&self) -> usize {
        self.grids.iter().map(|g| g.entries.len()).sum()
    }

    pub fn scalar_count(&self) -> usize {
        PARAMS_PER_REGION * self.entry_count()
    }

    pub fn is_identity(&self) -> bool {
        self.grids
            .iter()
            .all(|g| g.entries.values().all(MotionParam::is_identity))
    }

    /// Copies parameters from `other` for every region key both fields share
    /// at the same level; other entries keep their values.
    pub fn inherit(&mut self, other: &MotionField) {
        for (grid, src) in self.grids.iter_mut().zip(&other.grids) {
            for (key, param) in grid.entries.iter_mut() {
                if let Some(p) = src.entries.get(key) {
                    *param = *p;
                }
            }
        }
    }

    /// Rounds all parameters to `f32`, the wire precision.
    pub fn quantize_f32(&mut self) {
        for grid in &mut self.grids {
            grid.entries.values_mut().for_each(MotionParam::quantize_f32);
        }
    }

    /// Parameters flattened level by level in key order, 7 per entry
    /// (`Δμ` then `Δq`).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for grid in &self.grids {
            for p in grid.entries.values() {
                out.extend_from_slice(p.d_mu.as_slice());
                out.extend_from_slice(p.d_q.as_slice());
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.scalar_count());
        let mut chunks = flat.chunks_exact(PARAMS_PER_REGION);
        for grid in &mut self.grids {
            for p in grid.entries.values_mut() {
                let c = chunks.next().unwrap();
                p.d_mu = Vec3::new(c[0], c[1], c[2]);
                p.d_q = Quat::new(c[3], c[4], c[5], c[6]);
            }
        }
    }

    /// Offset of each Gaussian's entry in [`Self::params_flat`], per level.
    fn flat_slots(&self) -> Vec<Vec<usize>> {
        let mut base = 0;
        let mut out = Vec::with_capacity(self.levels());
        for (grid, keys) in self.grids.iter().zip(&self.assignments) {
            let index: BTreeMap<&RegionKey, usize> =
                grid.entries.keys().enumerate().map(|(i, k)| (k, i)).collect();
            out.push(
                keys.iter()
                    .map(|k| base + PARAMS_PER_REGION * index[k])
                    .collect(),
            );
            base += PARAMS_PER_REGION * grid.entries.len();
        }
        out
    }
}

/// Summed translation and summed (unnormalized) quaternion delta of one
/// Gaussian. A level without an entry contributes `(0,0,0)` and `(1,0,0,0)`.
pub fn compose_motion(field: &MotionField, index: usize) -> (Vec3, Quat) {
    let mut d_mu = Vec3::zeros();
    let mut d_q = Quat::zeros();
    for (grid, keys) in field.grids.iter().zip(&field.assignments) {
        let p = grid
            .entries
            .get(&keys[index])
            .copied()
            .unwrap_or_default();
        d_mu += p.d_mu;
        d_q += p.d_q;
    }
    (d_mu, d_q)
}

/// The unit rotation a summed delta applies, or `None` for no rotation.
fn delta_rotation(d_q: &Quat) -> Option<Quat> {
    let n = d_q.norm();
    if !(n >= MIN_DELTA_QUAT_NORM) {
        log::warn!("quaternion delta norm {n:e} below threshold; treated as identity");
        return None;
    }
    let u = d_q / n;
    if u == quat_identity() {
        None
    } else {
        Some(u)
    }
}

/// Moves every Gaussian: `μ ← μ + Δμ_g`, `q ← normalize(Δq_g) ⊗ q`. Scale,
/// opacity and color are untouched. An identity field returns the cloud
/// bit-for-bit.
pub fn apply_motion(cloud: &GaussianCloud, field: &MotionField) -> Result<GaussianCloud> {
    if field.gaussian_count() != cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "motion field assigned to {} gaussians, cloud has {}",
            field.gaussian_count(),
            cloud.len()
        )));
    }
    let mut out = cloud.clone();
    for i in 0..cloud.len() {
        let (d_mu, d_q) = compose_motion(field, i);
        let p = &mut out.positions[i];
        for k in 0..3 {
            // skipping zeros keeps -0.0 intact
            if d_mu[k] != 0.0 {
                p[k] += d_mu[k];
            }
        }
        if let Some(u) = delta_rotation(&d_q) {
            out.rotations[i] = quat_mul_raw(&u, &cloud.rotations[i]);
        }
    }
    Ok(out)
}

/// Gradient of the loss with respect to [`MotionField::params_flat`], given
/// render gradients for the moved cloud.
pub fn motion_gradient(cloud: &GaussianCloud, field: &MotionField, grads: &RenderGrads) -> Vec<f64> {
    let slots = field.flat_slots();
    let mut out = vec![0.0; field.scalar_count()];
    for i in 0..cloud.len() {
        let d_pos = grads.d.positions[i];
        let d_rot = grads.d.rotations[i];
        if d_pos == Vec3::zeros() && d_rot == Quat::zeros() {
            continue;
        }
        let (_, d_q) = compose_motion(field, i);
        let d_sum = if d_q.norm() >= MIN_DELTA_QUAT_NORM {
            // q' = n ⊗ q = M(q) n
            let d_unit = right_mul_matrix(&cloud.rotations[i]).transpose() * d_rot;
            normalize_vjp(&d_q, &d_unit)
        } else {
            Quat::zeros()
        };
        for level in &slots {
            let s = level[i];
            for k in 0..3 {
                out[s + k] += d_pos[k];
            }
            for k in 0..4 {
                out[s + 3 + k] += d_sum[k];
            }
        }
    }
    out
}

/// Starting point for the next frame: translation scaled by `factor`,
/// quaternion deviation from identity scaled by `factor`.
pub fn warm_start(prev: &MotionField, factor: f64) -> MotionField {
    let mut out = prev.clone();
    let id = quat_identity();
    for grid in &mut out.grids {
        for p in grid.entries.values_mut() {
            if p.is_identity() {
                continue;
            }
            p.d_mu *= factor;
            p.d_q = id + (p.d_q - id) * factor;
        }
    }
    out
}

/// Outcome of fitting one frame's motion.
#[derive(Debug, Clone)]
pub struct MotionFit {
    pub field: MotionField,
    /// Per-Gaussian 2D positional gradient norms over all steps.
    pub grad_accum: GradAccum,
    pub losses: Vec<f64>,
}

/// Fits the field's region deltas to the current frame's views with the cloud
/// frozen. With `cfg.motion_enabled` off, only gradient norms are collected.
pub fn optimize_motion(
    cloud: &GaussianCloud,
    field: MotionField,
    views: &[(Camera, ImageBuffer)],
    steps: usize,
    cfg: &TrainConfig,
    extent: f64,
) -> Result<MotionFit> {
    let mut field = field;
    let mut accum = GradAccum::new(cloud.len());
    let mut losses = Vec::with_capacity(steps);
    if steps == 0 || views.is_empty() {
        return Ok(MotionFit {
            field,
            grad_accum: accum,
            losses,
        });
    }
    let hp = AdamParams {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let mut params = field.params_flat();
    let mut moments = Moments::zeros(params.len());
    let is_translation: Vec<bool> = (0..params.len()).map(|i| i % PARAMS_PER_REGION < 3).collect();
    let mut lrs = vec![0.0; params.len()];
    let bg = Vec3::from(cfg.background);
    for step in 0..steps {
        let (cam, target) = &views[step % views.len()];
        let moved = apply_motion(cloud, &field)?;
        let prepared = Prepared::new(&moved, cam);
        let img = prepared.render(&bg);
        let (loss, d_img) = combined_loss(&img, target, cfg.lambda_dssim)?;
        let grads = prepared.backward(&bg, &d_img)?;
        accum.add(&grads);
        losses.push(loss.total);
        if !cfg.motion_enabled {
            continue;
        }
        let g = motion_gradient(cloud, &field, &grads);
        let lr_t = cfg.lr.decayed(cfg.lr.motion_translation * extent, step, steps);
        let lr_r = cfg.lr.decayed(cfg.lr.motion_rotation, step, steps);
        for (lr, &t) in lrs.iter_mut().zip(&is_translation) {
            *lr = if t { lr_t } else { lr_r };
        }
        moments.update_per_param(&mut params, &g, &lrs, &hp, step as u64 + 1);
        field.set_params_flat(&params);
    }
    Ok(MotionFit {
        field,
        grad_accum: accum,
        losses,
    })
}
