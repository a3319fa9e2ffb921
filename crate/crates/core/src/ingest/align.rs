//! Manhattan-world alignment: rotate the model so the ground plane is
//! horizontal with +Z pointing up (toward the cameras).
//!
//! 1. PCA pre-rotation: the direction of least point variance is rotated to
//!    +Z (oriented so the cameras lie on its positive side).
//! 2. RANSAC plane fit over the lowest 30% of points by the pre-rotated Z
//!    (1000 iterations, inlier threshold 1% of the scene extent); fewer
//!    than 20% inliers is a failure.
//! 3. The plane is refit by least squares to every point within the inlier
//!    threshold of the winning plane, and its normal is rotated to +Z with the smallest rotation.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SceneModel;
use crate::error::{Error, Result};
use crate::gaussian::bounding_radius;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignOptions {
    pub iterations: usize,
    /// Fraction of points (lowest by Z) used as ground candidates.
    pub lowest_fraction: f64,
    /// Inlier distance as a fraction of the scene extent.
    pub inlier_fraction: f64,
    /// Minimum inlier share of the candidate set.
    pub min_inlier_ratio: f64,
    pub min_points: usize,
    pub seed: u64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lowest_fraction: 0.3,
            inlier_fraction: 0.01,
            min_inlier_ratio: 0.2,
            min_points: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Alignment {
    /// World rotation applied to the model (`p' = R p`).
    pub rotation: Matrix3<f64>,
    pub model: SceneModel,
    /// Inlier share of the ground-candidate set.
    pub inlier_ratio: f64,
}

/// Smallest rotation taking unit vector `a` to unit vector `b`.
pub fn rotation_between(a: &Vector3<f64>, b: &Vector3<f64>) -> Matrix3<f64> {
    let v = a.cross(b);
    let c = a.dot(b);
    let s = v.norm();
    if s < 1e-15 {
        if c > 0.0 {
            return Matrix3::identity();
        }
        // 180°: rotate about any axis perpendicular to a
        let mut axis = a.cross(&Vector3::x());
        if axis.norm() < 1e-6 {
            axis = a.cross(&Vector3::y());
        }
        let axis = axis.normalize();
        return 2.0 * axis * axis.transpose() - Matrix3::identity();
    }
    let k = v.cross_matrix();
    Matrix3::identity() + k + k * k * ((1.0 - c) / (s * s))
}

/// Unit normal of the least-squares plane through `pts`.
pub fn fit_plane(pts: &[Vector3<f64>]) -> Vector3<f64> {
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vector3<f64>>() / n;
    let cov = pts
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    smallest_eigenvector(&cov)
}

fn smallest_eigenvector(m: &Matrix3<f64>) -> Vector3<f64> {
    let eig = SymmetricEigen::new(*m);
    let i = eig.eigenvalues.imin();
    eig.eigenvectors.column(i).normalize()
}

pub fn manhattan_align(model: &SceneModel) -> Result<Alignment> {
    manhattan_align_with(model, &AlignOptions::default())
}

pub fn manhattan_align_with(model: &SceneModel, opts: &AlignOptions) -> Result<Alignment> {
    let pts: Vec<Vector3<f64>> = model.points.iter().map(|p| p.position).collect();
    if pts.len() < opts.min_points {
        return Err(Error::AlignmentFailed(format!(
            "need at least {} points, have {}",
            opts.min_points,
            pts.len()
        )));
    }
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;

    // PCA pre-rotation
    let mut up = fit_plane(&pts);
    let cams = model.camera_centers();
    let side = if cams.is_empty() {
        up.z
    } else {
        cams.iter().map(|c| (c - mean).dot(&up)).sum::<f64>()
    };
    if side < 0.0 || (side == 0.0 && up.z < 0.0) {
        up = -up;
    }
    let pre = rotation_between(&up, &Vector3::z());
    let rotated: Vec<Vector3<f64>> = pts.iter().map(|p| pre * p).collect();

    // ground candidates: lowest fraction by Z
    let mut order: Vec<usize> = (0..rotated.len()).collect();
    order.sort_by(|&a, &b| rotated[a].z.total_cmp(&rotated[b].z).then(a.cmp(&b)));
    let n_low = ((rotated.len() as f64 * opts.lowest_fraction).ceil() as usize).clamp(3, rotated.len());
    let low: Vec<Vector3<f64>> = order[..n_low].iter().map(|&i| rotated[i]).collect();

    let threshold = opts.inlier_fraction * bounding_radius(&pts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(usize, Vector3<f64>, Vector3<f64>)> = None;
    for _ in 0..opts.iterations {
        let a = low[rng.random_range(0..n_low)];
        let b = low[rng.random_range(0..n_low)];
        let c = low[rng.random_range(0..n_low)];
        let n = (b - a).cross(&(c - a));
        if n.norm() < 1e-12 {
            continue;
        }
        let n = n.normalize();
        let count = low.iter().filter(|p| (*p - a).dot(&n).abs() <= threshold).count();
        if best.as_ref().is_none_or(|(c0, _, _)| count > *c0) {
            best = Some((count, n, a));
        }
    }
    let (count, n, a) = best.ok_or_else(|| Error::AlignmentFailed("all RANSAC samples degenerate".into()))?;
    let inlier_ratio = count as f64 / n_low as f64;
    if inlier_ratio < opts.min_inlier_ratio {
        return Err(Error::AlignmentFailed(format!(
            "best ground plane has {:.1}% inliers (< {:.0}%)",
            100.0 * inlier_ratio,
            100.0 * opts.min_inlier_ratio
        )));
    }
    // refine over every point near the winning plane, not just the candidates
    let inliers: Vec<Vector3<f64>> = rotated
        .iter()
        .filter(|p| (*p - a).dot(&n).abs() <= threshold)
        .copied()
        .collect();
    let mut normal = fit_plane(&inliers);
    if normal.z < 0.0 {
        normal = -normal;
    }
    let rotation = rotation_between(&normal, &Vector3::z()) * pre;
    let mut aligned = model.clone();
    aligned.rotate(&rotation);
    Ok(Alignment {
        rotation,
        model: aligned,
        inlier_ratio,
    })
}
