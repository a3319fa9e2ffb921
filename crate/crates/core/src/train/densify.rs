//! Density control: the view-gradient statistic and
//! clone / split / prune / opacity reset.

use nalgebra::{Matrix2x3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gaussian::{layout, logit, GaussianField, GaussianSplat};
use crate::render::PixelGradient;

/// Per-splat accumulated `Σ_v ‖(dL/dp_v)(dp_v/dx)‖` and observation counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyStats {
    pub grad_accum: Vec<f64>,
    /// Vector sum of the per-pixel products (clone direction).
    pub grad_direction: Vec<Vector3<f64>>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            grad_direction: vec![Vector3::zeros(); n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.grad_accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_accum.is_empty()
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.len());
    }

    /// Mean accumulated magnitude per observing view (0 if never observed).
    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.count[i] as f64
        }
    }
}

/// Adds one view's view-gradient terms: for every (splat, pixel) pair the
/// per-pixel product `g_vᵀ J` is formed first and its norm accumulated, so
/// opposing pixels never cancel. Each splat touching at least one pixel
/// gets one observation.
pub fn accumulate_view_gradient(
    stats: &mut DensifyStats,
    pixel_grads: &[PixelGradient],
    jacobians: &[Option<Matrix2x3<f64>>],
) {
    let mut seen = vec![false; stats.len()];
    for pg in pixel_grads {
        let i = pg.splat as usize;
        let Some(j) = &jacobians[i] else { continue };
        let z: Vector3<f64> = (pg.dl_dp.transpose() * j).transpose();
        stats.grad_accum[i] += z.norm();
        stats.grad_direction[i] += z;
        seen[i] = true;
    }
    for (c, s) in stats.count.iter_mut().zip(seen) {
        *c += s as u32;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub interval: usize,
    pub start: usize,
    pub stop: usize,
    /// τ: mean view-gradient magnitude that triggers clone/split.
    pub grad_threshold: f64,
    /// Clone below this fraction of the scene extent (max scale), split above.
    pub clone_scale_fraction: f64,
    pub split_scale_divisor: f64,
    pub prune_opacity: f64,
    /// World-size pruning: splats larger than this fraction of the extent are
    /// removed once the first opacity reset has happened.
    pub prune_scale_fraction: f64,
    pub opacity_reset_interval: usize,
    pub opacity_reset_value: f64,
    /// Upper bound on the number of splats (0 = unlimited); when exceeded the
    /// highest-gradient candidates are densified first.
    pub max_splats: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 500,
            stop: 15000,
            grad_threshold: 2e-4,
            clone_scale_fraction: 0.01,
            split_scale_divisor: 1.6,
            prune_opacity: 0.005,
            prune_scale_fraction: 0.1,
            opacity_reset_interval: 3000,
            opacity_reset_value: 0.01,
            max_splats: 0,
        }
    }
}

impl DensifyConfig {
    /// Whether density control runs after `iteration` (1-based).
    pub fn is_densify_iteration(&self, iteration: usize) -> bool {
        self.interval > 0
            && iteration >= self.start
            && iteration <= self.stop
            && iteration % self.interval == 0
    }

    pub fn is_opacity_reset_iteration(&self, iteration: usize) -> bool {
        self.opacity_reset_interval > 0
            && iteration > 0
            && iteration <= self.stop
            && iteration % self.opacity_reset_interval == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct DensifyReport {
    pub iteration: usize,
    pub before: usize,
    pub after: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub opacity_reset: bool,
}

/// Row provenance of the new field: `Some(old index)` for kept/copied
/// splats, `None` for freshly created ones (zero optimizer moments).
pub type RowSources = Vec<Option<usize>>;

/// Clone, split, prune and (at reset iterations) clamp opacities. Stats are
/// reset. Returns the report and the provenance of every new row.
pub fn densify_and_prune(
    field: &mut GaussianField,
    stats: &mut DensifyStats,
    config: &DensifyConfig,
    iteration: usize,
    rng: &mut impl Rng,
) -> (DensifyReport, RowSources) {
    let before = field.len();
    let extent = field.scene_extent;
    let cutoff = config.clone_scale_fraction * extent;

    let mut candidates: Vec<usize> = (0..before)
        .filter(|&i| stats.count[i] > 0 && stats.mean(i) >= config.grad_threshold)
        .collect();
    if config.max_splats > 0 {
        // each clone/split adds one splat; keep the strongest within budget
        let budget = config.max_splats.saturating_sub(before);
        candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
        candidates.truncate(budget);
        candidates.sort_unstable();
    }

    let mut is_split = vec![false; before];
    let mut new_splats: Vec<(GaussianSplat, Option<usize>)> = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    for &i in &candidates {
        let parent = &field.splats[i];
        if parent.max_scale() < cutoff {
            let mut child = parent.clone();
            let dir = stats.grad_direction[i];
            if dir.norm() > 0.0 {
                // nudge against the accumulated gradient (descent direction)
                child.center -= dir.normalize() * (0.5 * parent.max_scale());
            }
            new_splats.push((child, None));
            cloned += 1;
        } else {
            let rot = parent.rotation_matrix();
            let scale = parent.scale();
            for _ in 0..2 {
                let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let mut child = parent.clone();
                child.center = parent.center + rot * scale.component_mul(&z);
                child.log_scale = parent.log_scale.map(|l| l - config.split_scale_divisor.ln());
                new_splats.push((child, None));
            }
            is_split[i] = true;
            split += 1;
        }
    }

    let reset_done_before = config.opacity_reset_interval > 0 && iteration > config.opacity_reset_interval;
    let big = config.prune_scale_fraction * extent;
    let mut pruned = 0;
    let mut kept: Vec<(GaussianSplat, Option<usize>)> = Vec::with_capacity(before + new_splats.len());
    for (i, s) in field.splats.drain(..).enumerate() {
        if is_split[i] {
            continue;
        }
        let too_big = reset_done_before && big > 0.0 && s.max_scale() > big;
        if s.opacity() < config.prune_opacity || too_big {
            pruned += 1;
            continue;
        }
        kept.push((s, Some(i)));
    }
    for (s, src) in new_splats {
        if s.opacity() < config.prune_opacity {
            pruned += 1;
            continue;
        }
        kept.push((s, src));
    }

    let sources: RowSources = kept.iter().map(|(_, src)| *src).collect();
    field.splats = kept.into_iter().map(|(s, _)| s).collect();
    let opacity_reset = config.is_opacity_reset_iteration(iteration);
    if opacity_reset {
        reset_opacity(field, config.opacity_reset_value);
    }
    *stats = DensifyStats::new(field.len());
    (
        DensifyReport {
            iteration,
            before,
            after: field.len(),
            cloned,
            split,
            pruned,
            opacity_reset,
        },
        sources,
    )
}

/// Clamps every opacity to at most `value` (in logit space).
pub fn reset_opacity(field: &mut GaussianField, value: f64) {
    let cap = logit(value);
    for s in &mut field.splats {
        s.opacity_logit = s.opacity_logit.min(cap);
    }
}

/// Index of the opacity parameter within one splat's row.
pub const OPACITY_COLUMN: usize = layout::OPACITY;
