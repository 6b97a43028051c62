//! Gaussian primitives, the structure-of-arrays cloud, and scene bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{covariance_from_scale_rot, quat_identity, sigmoid, Mat3, Quat, Vec3, SH_LEN};

/// One anisotropic 3D Gaussian in its unconstrained parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub sh: [f64; SH_LEN],
}

impl Gaussian {
    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Mat3 {
        covariance_from_scale_rot(&self.log_scale, &self.rotation)
    }
}

impl Default for Gaussian {
    fn default() -> Self {
        Self {
            position: Vec3::zeros(),
            log_scale: Vec3::zeros(),
            rotation: quat_identity(),
            opacity_logit: 0.0,
            sh: [0.0; SH_LEN],
        }
    }
}

/// Attribute groups of a cloud, in their canonical serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    Position,
    LogScale,
    Rotation,
    Opacity,
    Sh,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Position,
        Attribute::LogScale,
        Attribute::Rotation,
        Attribute::Opacity,
        Attribute::Sh,
    ];

    pub fn width(self) -> usize {
        match self {
            Attribute::Position | Attribute::LogScale => 3,
            Attribute::Rotation => 4,
            Attribute::Opacity => 1,
            Attribute::Sh => SH_LEN,
        }
    }
}

/// Scalars per Gaussian across all attributes.
pub const PARAMS_PER_GAUSSIAN: usize = 3 + 3 + 4 + 1 + SH_LEN;

/// Structure-of-arrays storage for `n` Gaussians.
///
/// The same layout doubles as the container for per-attribute gradients and
/// optimizer moments, so row edits (append, retain, gather) stay in lockstep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<[f64; SH_LEN]>,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    /// `n` rows of zeros in every attribute (gradient / moment buffers).
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vec3::zeros(); n],
            log_scales: vec![Vec3::zeros(); n],
            rotations: vec![Quat::zeros(); n],
            opacity_logits: vec![0.0; n],
            sh: vec![[0.0; SH_LEN]; n],
        }
    }

    pub fn from_gaussians<I: IntoIterator<Item = Gaussian>>(gaussians: I) -> Self {
        let mut cloud = Self::new();
        for g in gaussians {
            cloud.push(g);
        }
        cloud
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.positions.push(g.position);
        self.log_scales.push(g.log_scale);
        self.rotations.push(g.rotation);
        self.opacity_logits.push(g.opacity_logit);
        self.sh.push(g.sh);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i],
            log_scale: self.log_scales[i],
            rotation: self.rotations[i],
            opacity_logit: self.opacity_logits[i],
            sh: self.sh[i],
        }
    }

    pub fn set(&mut self, i: usize, g: Gaussian) {
        self.positions[i] = g.position;
        self.log_scales[i] = g.log_scale;
        self.rotations[i] = g.rotation;
        self.opacity_logits[i] = g.opacity_logit;
        self.sh[i] = g.sh;
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    /// Appends all rows of `other`.
    pub fn extend_from(&mut self, other: &GaussianCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
        self.sh.extend_from_slice(&other.sh);
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> GaussianCloud {
        GaussianCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            log_scales: indices.iter().map(|&i| self.log_scales[i]).collect(),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
            opacity_logits: indices.iter().map(|&i| self.opacity_logits[i]).collect(),
            sh: indices.iter().map(|&i| self.sh[i]).collect(),
        }
    }

    /// Keeps rows where `keep[i]` is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        filter(&mut self.positions, keep);
        filter(&mut self.log_scales, keep);
        filter(&mut self.rotations, keep);
        filter(&mut self.opacity_logits, keep);
        filter(&mut self.sh, keep);
    }

    pub fn attr(&self, i: usize, attr: Attribute, k: usize) -> f64 {
        match attr {
            Attribute::Position => self.positions[i][k],
            Attribute::LogScale => self.log_scales[i][k],
            Attribute::Rotation => self.rotations[i][k],
            Attribute::Opacity => self.opacity_logits[i],
            Attribute::Sh => self.sh[i][k],
        }
    }

    pub fn attr_mut(&mut self, i: usize, attr: Attribute, k: usize) -> &mut f64 {
        match attr {
            Attribute::Position => &mut self.positions[i][k],
            Attribute::LogScale => &mut self.log_scales[i][k],
            Attribute::Rotation => &mut self.rotations[i][k],
            Attribute::Opacity => &mut self.opacity_logits[i],
            Attribute::Sh => &mut self.sh[i][k],
        }
    }

    /// All scalars of one attribute as a contiguous row-major slice.
    pub fn flat(&self, attr: Attribute) -> &[f64] {
        match attr {
            Attribute::Position => bytemuck::cast_slice(&self.positions),
            Attribute::LogScale => bytemuck::cast_slice(&self.log_scales),
            Attribute::Rotation => bytemuck::cast_slice(&self.rotations),
            Attribute::Opacity => &self.opacity_logits,
            Attribute::Sh => bytemuck::cast_slice(&self.sh),
        }
    }

    pub fn flat_mut(&mut self, attr: Attribute) -> &mut [f64] {
        match attr {
            Attribute::Position => bytemuck::cast_slice_mut(&mut self.positions),
            Attribute::LogScale => bytemuck::cast_slice_mut(&mut self.log_scales),
            Attribute::Rotation => bytemuck::cast_slice_mut(&mut self.rotations),
            Attribute::Opacity => &mut self.opacity_logits,
            Attribute::Sh => bytemuck::cast_slice_mut(&mut self.sh),
        }
    }

    /// Largest world-space standard deviation of Gaussian `i`.
    pub fn max_scale(&self, i: usize) -> f64 {
        self.log_scales[i].max().exp()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.sh.len() != n
        {
            return Err(Error::InvalidArgument(
                "attribute arrays differ in length".into(),
            ));
        }
        if self.positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument("non-finite position".into()));
        }
        Ok(())
    }

    /// Rounds every attribute to the nearest `f32`, the precision of the
    /// on-disk formats. Committed state is always kept f32-representable so
    /// replay from files is bit-exact.
    pub fn quantize_f32(&mut self) {
        let q = |x: &mut f64| *x = *x as f32 as f64;
        self.positions.iter_mut().flat_map(|v| v.iter_mut()).for_each(q);
        self.log_scales.iter_mut().flat_map(|v| v.iter_mut()).for_each(q);
        self.rotations.iter_mut().flat_map(|v| v.iter_mut()).for_each(q);
        self.opacity_logits.iter_mut().for_each(q);
        self.sh.iter_mut().flat_map(|v| v.iter_mut()).for_each(q);
    }

    pub fn quantized_f32(mut self) -> Self {
        self.quantize_f32();
        self
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &GaussianCloud) -> bool {
        if self.len() != other.len() {
            return false;
        }
        let bits = |a: f64, b: f64| a.to_bits() == b.to_bits();
        Attribute::ALL.iter().all(|&attr| {
            (0..self.len()).all(|i| {
                (0..attr.width()).all(|k| bits(self.attr(i, attr, k), other.attr(i, attr, k)))
            })
        })
    }
}

/// Axis-aligned scene box used to size region grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min_corner: [f64; 3],
    pub max_corner: [f64; 3],
}

/// Smallest extent any bounds axis is allowed to have.
pub const MIN_BOUNDS_EXTENT: f64 = 1e-3;
pub const DEFAULT_OUTLIER_QUANTILE: f64 = 0.01;

impl SceneBounds {
    pub fn extent(&self) -> Vec3 {
        Vec3::from_fn(|k, _| self.max_corner[k] - self.min_corner[k])
    }

    pub fn volume(&self) -> f64 {
        self.extent().product()
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|k| {
            self.min_corner[k].is_finite()
                && self.max_corner[k].is_finite()
                && self.max_corner[k] > self.min_corner[k]
        })
    }
}

/// Per-axis trimmed box around the cloud positions: values below the
/// `outlier_quantile` and above the `1 - outlier_quantile` quantile are
/// dropped, the survivors' span gets a 1% margin on each side, and any axis
/// thinner than [`MIN_BOUNDS_EXTENT`] is widened to it.
pub fn compute_bounds(cloud: &GaussianCloud, outlier_quantile: f64) -> Result<SceneBounds> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(0.0..0.5).contains(&outlier_quantile) {
        return Err(Error::InvalidArgument(format!(
            "outlier quantile {outlier_quantile} outside [0, 0.5)"
        )));
    }
    let n = cloud.len();
    let mut min_corner = [0.0; 3];
    let mut max_corner = [0.0; 3];
    for axis in 0..3 {
        let mut vals: Vec<f64> = cloud.positions.iter().map(|p| p[axis]).collect();
        vals.sort_by(f64::total_cmp);
        // number of samples dropped at each tail
        let drop = ((outlier_quantile * n as f64).floor() as usize).min((n - 1) / 2);
        let lo = vals[drop];
        let hi = vals[n - 1 - drop];
        let margin = 0.01 * (hi - lo);
        let (mut lo, mut hi) = (lo - margin, hi + margin);
        if hi - lo < MIN_BOUNDS_EXTENT {
            let mid = 0.5 * (lo + hi);
            lo = mid - 0.5 * MIN_BOUNDS_EXTENT;
            hi = mid + 0.5 * MIN_BOUNDS_EXTENT;
        }
        min_corner[axis] = lo;
        max_corner[axis] = hi;
    }
    Ok(SceneBounds {
        min_corner,
        max_corner,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(p: [f64; 3]) -> Gaussian {
        Gaussian {
            position: Vec3::from(p),
            ..Default::default()
        }
    }

    #[test]
    fn single_point_bounds_get_minimum_extent() {
        let cloud = GaussianCloud::from_gaussians([at([1.0, 2.0, 3.0])]);
        let b = compute_bounds(&cloud, 0.0).unwrap();
        for k in 0..3 {
            let c = [1.0, 2.0, 3.0][k];
            assert!((b.min_corner[k] - (c - 5e-4)).abs() < 1e-12);
            assert!((b.max_corner[k] - (c + 5e-4)).abs() < 1e-12);
        }
        assert!(b.is_valid());
    }

    #[test]
    fn trimmed_bounds_ignore_far_outlier() {
        // 100 points spread over the 8 unit-cube corners plus one far outlier.
        let mut gs = Vec::new();
        for i in 0..100 {
            let c = i % 8;
            gs.push(at([(c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64]));
        }
        gs.push(at([1000.0, 0.0, 0.0]));
        let cloud = GaussianCloud::from_gaussians(gs);
        let b = compute_bounds(&cloud, 0.02).unwrap();
        // 101 points, 2% -> 2 dropped per tail; the outlier is gone.
        for k in 0..3 {
            assert!((b.min_corner[k] + 0.01).abs() < 1e-12, "{b:?}");
            assert!((b.max_corner[k] - 1.01).abs() < 1e-12, "{b:?}");
        }
    }

    #[test]
    fn untrimmed_bounds_are_min_max_with_margin() {
        let cloud = GaussianCloud::from_gaussians([
            at([-1.0, 0.0, 2.0]),
            at([3.0, 1.0, 4.0]),
            at([0.0, -2.0, 3.0]),
        ]);
        let b = compute_bounds(&cloud, 0.0).unwrap();
        assert_eq!(b.min_corner, [-1.04, -2.03, 1.98]);
        assert!((b.max_corner[0] - 3.04).abs() < 1e-12);
        assert!((b.max_corner[1] - 1.03).abs() < 1e-12);
        assert!((b.max_corner[2] - 4.02).abs() < 1e-12);
    }

    #[test]
    fn empty_cloud_has_no_bounds() {
        assert!(matches!(
            compute_bounds(&GaussianCloud::new(), 0.01),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn row_edits_keep_attributes_aligned() {
        let mut cloud = GaussianCloud::from_gaussians((0..5).map(|i| Gaussian {
            opacity_logit: i as f64,
            ..at([i as f64, 0.0, 0.0])
        }));
        cloud.retain_mask(&[true, false, true, false, true]);
        assert_eq!(cloud.opacity_logits, vec![0.0, 2.0, 4.0]);
        assert_eq!(cloud.positions[1].x, 2.0);
        let picked = cloud.select(&[2, 0]);
        assert_eq!(picked.opacity_logits, vec![4.0, 0.0]);
        cloud.extend_from(&picked);
        assert_eq!(cloud.len(), 5);
        cloud.validate().unwrap();
    }
}
