use nalgebra::Vector3;

use crate::camera::Intrinsics;
use crate::image::Image;

/// Camera-space normals from a depth map.
///
/// Each pixel is back-projected to `P = depth · K⁻¹ (u, v, 1)`; the normal is
/// the normalized cross product of the image-space derivatives of `P`,
/// oriented toward the camera. Central differences are used where both
/// neighbours have depth, one-sided differences otherwise; pixels without
/// depth (or without any usable neighbour) get a zero normal.
pub fn depth_to_normal(depth: &Image, k: &Intrinsics) -> Image {
    let (w, h) = (depth.width, depth.height);
    let mut out = Image::new(w, h, 3);
    let point = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let d = depth.get(x, y, 0);
        (d > 0.0).then(|| k.unproject(x as f64, y as f64) * d)
    };
    // derivative along one axis from whichever neighbours are valid
    let derivative = |center: Vector3<f64>, prev: Option<Vector3<f64>>, next: Option<Vector3<f64>>| match (prev, next) {
        (Some(a), Some(b)) => Some((b - a) * 0.5),
        (None, Some(b)) => Some(b - center),
        (Some(a), None) => Some(center - a),
        (None, None) => None,
    };
    for y in 0..h {
        for x in 0..w {
            let Some(p) = point(x, y) else { continue };
            let du = derivative(
                p,
                (x > 0).then(|| point(x - 1, y)).flatten(),
                (x + 1 < w).then(|| point(x + 1, y)).flatten(),
            );
            let dv = derivative(
                p,
                (y > 0).then(|| point(x, y - 1)).flatten(),
                (y + 1 < h).then(|| point(x, y + 1)).flatten(),
            );
            let (Some(du), Some(dv)) = (du, dv) else { continue };
            let n = du.cross(&dv);
            let len = n.norm();
            if len <= 1e-15 {
                continue;
            }
            let mut n = n / len;
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            for c in 0..3 {
                out.set(x, y, c, n[c]);
            }
        }
    }
    out
}
