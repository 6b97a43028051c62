use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-attribute step sizes for the adaptive-moment optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub position: f64,
    pub sh: f64,
    pub opacity: f64,
    pub log_scale: f64,
    pub rotation: f64,
    /// Region translation; multiplied by the scene extent.
    pub motion_translation: f64,
    pub motion_rotation: f64,
    /// Position and motion rates decay log-linearly to this fraction of
    /// their start value over a training run or a frame's motion steps.
    pub final_ratio: f64,
}

impl LearningRates {
    /// `base` decayed to `base · final_ratio` at the last of `total` steps.
    pub fn decayed(&self, base: f64, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return base;
        }
        let t = (step as f64 / (total - 1) as f64).min(1.0);
        base * self.final_ratio.powf(t)
    }
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            sh: 2.5e-3,
            opacity: 5e-2,
            log_scale: 5e-3,
            rotation: 1e-3,
            motion_translation: 1e-3,
            motion_rotation: 1e-3,
            final_ratio: 0.01,
        }
    }
}

/// Every hyperparameter of initial training and the per-frame pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lambda_dssim: f64,
    pub lambda_noise: f64,
    pub init_steps: usize,
    pub split_stop_step: usize,
    /// First step at which initial training densifies.
    pub densify_start_step: usize,
    pub init_densify_interval: usize,
    pub refine_densify_interval: usize,
    pub grad_clone_threshold: f64,
    pub prune_opacity_threshold: f64,
    /// Gaussians larger than this fraction of the scene extent are split,
    /// smaller ones cloned.
    pub small_gaussian_fraction: f64,
    pub split_scale_divisor: f64,
    /// Upper bound on per-frame clones as a fraction of the cloud size.
    pub clone_cap_fraction: f64,
    pub lr: LearningRates,
    pub motion_steps: usize,
    pub refine_steps: usize,
    pub warm_start_factor: f64,
    pub max_gaussians_per_region: usize,
    pub motion_levels: usize,
    pub parallel_frames: usize,
    pub outlier_quantile: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub background: [f64; 3],
    /// Ablation switch: when off, motion parameters stay at identity and the
    /// motion stage only accumulates gradients.
    pub motion_enabled: bool,
    /// Ablation switch: when off, no Gaussians are added and the refinement
    /// budget goes to motion steps instead.
    pub refine_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda_dssim: 0.2,
            lambda_noise: 0.01,
            init_steps: 10_000,
            split_stop_step: 5_000,
            densify_start_step: 500,
            init_densify_interval: 100,
            refine_densify_interval: 40,
            grad_clone_threshold: 2e-4,
            prune_opacity_threshold: 5e-3,
            small_gaussian_fraction: 0.01,
            split_scale_divisor: 1.6,
            clone_cap_fraction: 0.05,
            lr: LearningRates::default(),
            motion_steps: 100,
            refine_steps: 100,
            warm_start_factor: 0.6,
            max_gaussians_per_region: 5,
            motion_levels: 3,
            parallel_frames: 1,
            outlier_quantile: crate::gaussian::DEFAULT_OUTLIER_QUANTILE,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            background: [0.0; 3],
            motion_enabled: true,
            refine_enabled: true,
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidSpec {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("lambda_noise", self.lambda_noise),
            ("lr.position", self.lr.position),
            ("lr.sh", self.lr.sh),
            ("lr.opacity", self.lr.opacity),
            ("lr.log_scale", self.lr.log_scale),
            ("lr.rotation", self.lr.rotation),
            ("lr.motion_translation", self.lr.motion_translation),
            ("lr.motion_rotation", self.lr.motion_rotation),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        let positive = [
            ("grad_clone_threshold", self.grad_clone_threshold),
            ("prune_opacity_threshold", self.prune_opacity_threshold),
            ("small_gaussian_fraction", self.small_gaussian_fraction),
            ("eps", self.eps),
            ("lr.final_ratio", self.lr.final_ratio),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be > 0, got {v}")));
            }
        }
        let unit = [
            ("lambda_dssim", self.lambda_dssim),
            ("warm_start_factor", self.warm_start_factor),
            ("clone_cap_fraction", self.clone_cap_fraction),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("beta1", "moment decay rates must lie in [0, 1)"));
        }
        if !(self.split_scale_divisor > 1.0) {
            return Err(invalid("split_scale_divisor", "must be > 1"));
        }
        if !(0.0..0.5).contains(&self.outlier_quantile) {
            return Err(invalid("outlier_quantile", "must lie in [0, 0.5)"));
        }
        if self.init_densify_interval == 0 || self.refine_densify_interval == 0 {
            return Err(invalid("densify_interval", "must be >= 1"));
        }
        if self.max_gaussians_per_region == 0 {
            return Err(invalid("max_gaussians_per_region", "must be >= 1"));
        }
        if self.motion_levels == 0 || self.motion_levels > u8::MAX as usize {
            return Err(invalid("motion_levels", "must lie in [1, 255]"));
        }
        if self.parallel_frames == 0 {
            return Err(invalid("parallel_frames", "must be >= 1"));
        }
        if self.background.iter().any(|c| !c.is_finite()) {
            return Err(invalid("background", "must be finite"));
        }
        Ok(())
    }

    /// Motion and refinement step counts after applying the ablation switches.
    pub fn effective_steps(&self) -> (usize, usize) {
        if self.refine_enabled {
            (self.motion_steps, self.refine_steps)
        } else {
            (self.motion_steps + self.refine_steps, 0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.warm_start_factor, 0.6);
        assert_eq!(c.max_gaussians_per_region, 5);
        assert_eq!(c.motion_steps, 100);
        assert_eq!(c.lambda_noise, 0.01);
        let s = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_json_fills_defaults_and_rejects_unknown() {
        let c: TrainConfig = serde_json::from_str(r#"{"motion_levels": 1}"#).unwrap();
        assert_eq!(c.motion_levels, 1);
        assert_eq!(c.refine_steps, 100);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"levels": 1}"#).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let c = TrainConfig {
            parallel_frames: 0,
            ..Default::default()
        };
        match c.validate() {
            Err(Error::InvalidSpec { field, .. }) => assert_eq!(field, "parallel_frames"),
            other => panic!("{other:?}"),
        }
        let c = TrainConfig {
            lambda_noise: -1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn refine_ablation_moves_budget_to_motion() {
        let c = TrainConfig {
            refine_enabled: false,
            ..Default::default()
        };
        assert_eq!(c.effective_steps(), (200, 0));
    }
}
