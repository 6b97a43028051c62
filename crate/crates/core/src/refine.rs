//! Per-frame refinement: clone where motion left large gradients, optimize
//! only the clones against the frozen base, then merge and drop as many
//! low-opacity Gaussians as were added.

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::loss::combined_loss;
use crate::math::Vec3;
use crate::optim::{AdamParams, CloudAdam};
use crate::raster::{Prepared, RenderGrads};
use crate::train::{densify_clone, densify_split, prune_by_opacity, GradAccum, View};

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub cloned_count: usize,
    /// Indices into the merged (base then additions) ordering, ascending.
    pub pruned_indices: Vec<u32>,
    pub pre_count: usize,
    pub post_count: usize,
    pub psnr_before: f64,
    pub psnr_after: f64,
}

/// Indices whose mean gradient norm exceeds `threshold`, keeping at most
/// `floor(cap_fraction · n)` of the largest. Returned in ascending order.
pub fn select_clone_candidates(mean_grads: &[f64], threshold: f64, cap_fraction: f64) -> Vec<usize> {
    let cap = (cap_fraction * mean_grads.len() as f64).floor() as usize;
    let mut over: Vec<usize> = (0..mean_grads.len())
        .filter(|&i| mean_grads[i] > threshold)
        .collect();
    over.sort_by(|&a, &b| mean_grads[b].total_cmp(&mean_grads[a]).then(a.cmp(&b)));
    over.truncate(cap);
    over.sort_unstable();
    over
}

/// Optimizes `additions` for `steps` steps while rendering them together with
/// the frozen `base`. Every `refine_densify_interval` steps the additions
/// alone are cloned, split and opacity-pruned.
pub fn refine_new_gaussians(
    base: &GaussianCloud,
    additions: GaussianCloud,
    views: &[View],
    steps: usize,
    cfg: &TrainConfig,
    extent: f64,
    rng: &mut impl Rng,
) -> Result<GaussianCloud> {
    let mut additions = additions;
    if steps == 0 || additions.is_empty() || views.is_empty() {
        return Ok(additions);
    }
    let mut adam = CloudAdam::new(
        additions.len(),
        AdamParams {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        },
    );
    let mut accum = GradAccum::new(additions.len());
    let lr = &cfg.lr;
    let lrs = [lr.position * extent, lr.log_scale, lr.rotation, lr.opacity, lr.sh];
    let bg = Vec3::from(cfg.background);
    let n_base = base.len();
    for step in 0..steps {
        let (cam, target) = &views[step % views.len()];
        let mut scene = base.clone();
        scene.extend_from(&additions);
        let prepared = Prepared::new(&scene, cam);
        let img = prepared.render(&bg);
        let (_, d_img) = combined_loss(&img, target, cfg.lambda_dssim)?;
        let grads = prepared.backward(&bg, &d_img)?;
        let tail = tail_grads(&grads, n_base);
        adam.step(&mut additions, &tail.d, &lrs);
        accum.add(&tail);
        if (step + 1) % cfg.refine_densify_interval == 0 {
            let cutoff = cfg.small_gaussian_fraction * extent;
            let thr = cfg.grad_clone_threshold;
            let mut mean = accum.mean();
            let clone = densify_clone(&mut additions, &mean, thr, cutoff);
            clone.apply_to_adam(&mut adam);
            mean.extend(std::iter::repeat_n(0.0, clone.appended));
            let split = densify_split(
                &mut additions,
                &mean,
                thr,
                cutoff,
                0,
                usize::MAX,
                cfg.split_scale_divisor,
                rng,
            );
            split.apply_to_adam(&mut adam);
            prune_by_opacity(&mut additions, cfg.prune_opacity_threshold).apply_to_adam(&mut adam);
            accum = GradAccum::new(additions.len());
            if additions.is_empty() {
                break;
            }
        }
    }
    Ok(additions)
}

/// Gradients of the rows from `start` on.
fn tail_grads(grads: &RenderGrads, start: usize) -> RenderGrads {
    let idx: Vec<usize> = (start..grads.d.len()).collect();
    RenderGrads {
        d: grads.d.select(&idx),
        mean2d_grad_norm: grads.mean2d_grad_norm[start..].to_vec(),
        visible: grads.visible[start..].to_vec(),
    }
}

/// Concatenates `base` and `additions`, then removes the `|additions|`
/// lowest-opacity Gaussians (lower index first on ties). Returns the
/// next-frame cloud and the removed indices in the merged ordering.
pub fn merge_and_rebalance(
    base: &GaussianCloud,
    additions: &GaussianCloud,
) -> Result<(GaussianCloud, Vec<u32>)> {
    if additions.len() > base.len() {
        return Err(Error::RebalanceOverflow {
            additions: additions.len(),
            base: base.len(),
        });
    }
    let mut merged = base.clone();
    merged.extend_from(additions);
    if additions.is_empty() {
        return Ok((merged, Vec::new()));
    }
    let mut order: Vec<usize> = (0..merged.len()).collect();
    // the logit is monotone in opacity, so it orders identically
    order.sort_by(|&a, &b| {
        merged.opacity_logits[a]
            .total_cmp(&merged.opacity_logits[b])
            .then(a.cmp(&b))
    });
    let mut pruned: Vec<usize> = order[..additions.len()].to_vec();
    pruned.sort_unstable();
    let mut keep = vec![true; merged.len()];
    for &i in &pruned {
        keep[i] = false;
    }
    merged.retain_mask(&keep);
    Ok((merged, pruned.into_iter().map(|i| i as u32).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use crate::math::logit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn candidate_examples() {
        assert!(select_clone_candidates(&[0.0; 40], 2e-4, 0.05).is_empty());
        let mut g = vec![0.0; 40];
        g[17] = 2e-3;
        assert_eq!(select_clone_candidates(&g, 2e-4, 0.05), vec![17]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g: Vec<f64> = (0..1000)
            .map(|i| if i % 2 == 0 { rng.random_range(3e-4..1e-2) } else { 0.0 })
            .collect();
        let picked = select_clone_candidates(&g, 2e-4, 0.05);
        assert_eq!(picked.len(), 50);
        let mut sorted: Vec<f64> = g.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cut = sorted[49];
        assert!(picked.iter().all(|&i| g[i] >= cut));
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
    }

    fn cloud_with_opacities(ops: &[f64]) -> GaussianCloud {
        GaussianCloud::from_gaussians(ops.iter().enumerate().map(|(i, &o)| Gaussian {
            position: Vec3::new(i as f64, 0.0, 0.0),
            opacity_logit: logit(o),
            ..Default::default()
        }))
    }

    #[test]
    fn rebalance_keeps_count_and_drops_lowest() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ops: Vec<f64> = (0..100).map(|_| rng.random_range(0.01..0.99)).collect();
        let base = cloud_with_opacities(&ops);
        let add_ops: Vec<f64> = (0..10).map(|_| rng.random_range(0.01..0.99)).collect();
        let adds = cloud_with_opacities(&add_ops);
        let (next, pruned) = merge_and_rebalance(&base, &adds).unwrap();
        assert_eq!(next.len(), 100);
        assert_eq!(pruned.len(), 10);
        let mut all: Vec<(f64, usize)> = ops.iter().chain(&add_ops).copied().zip(0..).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut expect: Vec<u32> = all[..10].iter().map(|p| p.1 as u32).collect();
        expect.sort_unstable();
        assert_eq!(pruned, expect);
    }

    #[test]
    fn rebalance_edge_cases() {
        let base = cloud_with_opacities(&[0.5, 0.6, 0.7]);
        let (same, pruned) = merge_and_rebalance(&base, &GaussianCloud::new()).unwrap();
        assert!(same.bit_eq(&base));
        assert!(pruned.is_empty());

        let mut ops = vec![0.9; 10];
        ops[3] = 0.2;
        ops[7] = 0.2;
        let base = cloud_with_opacities(&ops);
        let (_, pruned) = merge_and_rebalance(&base, &cloud_with_opacities(&[0.95])).unwrap();
        assert_eq!(pruned, vec![3]);

        let small = cloud_with_opacities(&[0.5]);
        assert!(matches!(
            merge_and_rebalance(&small, &cloud_with_opacities(&[0.5, 0.5])),
            Err(Error::RebalanceOverflow { .. })
        ));
    }

    #[test]
    fn zero_steps_or_empty_additions_are_no_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = cloud_with_opacities(&[0.5, 0.5]);
        let adds = cloud_with_opacities(&[0.3]);
        let cfg = TrainConfig::default();
        let out = refine_new_gaussians(&base, adds.clone(), &[], 0, &cfg, 1.0, &mut rng).unwrap();
        assert!(out.bit_eq(&adds));
        let out = refine_new_gaussians(&base, GaussianCloud::new(), &[], 10, &cfg, 1.0, &mut rng).unwrap();
        assert!(out.is_empty());
    }
}
