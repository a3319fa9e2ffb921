//! Projected area of an axis-aligned box in a pinhole camera.
//!
//! The box is clipped against the near plane in camera space (surviving
//! corners plus edge/plane intersections), the clipped vertices are
//! projected, their convex hull is clipped to the image rectangle with
//! Sutherland–Hodgman, and the area is taken with the shoelace formula.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraView;

/// Camera-space depth of the clipping plane.
pub const VIS_NEAR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityReport {
    pub camera: u32,
    pub cell: usize,
    /// `A_proj / A_t ∈ [0, 1]`.
    pub ratio: f64,
    /// Projected area in pixels², clipped to the image.
    pub projected_area: f64,
    /// Image area `W·H` in pixels².
    pub image_area: f64,
}

/// Signed shoelace area (positive for counter-clockwise in x-right/y-up).
pub fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
}

fn cross(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull (Andrew's monotone chain), counter-clockwise, without
/// collinear points.
pub fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vector2<f64>>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

/// Sutherland–Hodgman clip of a polygon to `[x0, x1] × [y0, y1]`.
pub fn clip_to_rect(poly: &[Vector2<f64>], x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Vector2<f64>> {
    // each edge: inside test value f(p) ≥ 0
    let edges: [(usize, f64, f64); 4] = [(0, x0, 1.0), (0, x1, -1.0), (1, y0, 1.0), (1, y1, -1.0)];
    let mut out = poly.to_vec();
    for (axis, bound, sign) in edges {
        if out.is_empty() {
            break;
        }
        let f = |p: &Vector2<f64>| sign * (p[axis] - bound);
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let (fc, fp) = (f(&cur), f(&prev));
            if fc >= 0.0 {
                if fp < 0.0 {
                    out.push(prev + (cur - prev) * (fp / (fp - fc)));
                }
                out.push(cur);
            } else if fp >= 0.0 {
                out.push(prev + (cur - prev) * (fp / (fp - fc)));
            }
        }
    }
    out
}

/// The 8 corners of `[lo, hi]` (bit i of the index selects hi on axis i).
pub fn box_corners(lo: &Vector3<f64>, hi: &Vector3<f64>) -> [Vector3<f64>; 8] {
    std::array::from_fn(|i| {
        Vector3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        )
    })
}

/// Vertices of the box clipped to camera-space `z ≥ near`, in camera space.
fn clip_box_near(camera_pts: &[Vector3<f64>; 8], near: f64) -> Vec<Vector3<f64>> {
    let mut out: Vec<Vector3<f64>> = camera_pts.iter().filter(|p| p.z >= near).copied().collect();
    for a in 0..8usize {
        for bit in [1usize, 2, 4] {
            let b = a | bit;
            if b == a {
                continue;
            }
            let (pa, pb) = (camera_pts[a], camera_pts[b]);
            if (pa.z < near) != (pb.z < near) {
                let t = (near - pa.z) / (pb.z - pa.z);
                out.push(pa + (pb - pa) * t);
            }
        }
    }
    out
}

/// Projected area (pixels², clipped to the image) of the world box
/// `[lo, hi]`.
pub fn projected_box_area(camera: &CameraView, lo: &Vector3<f64>, hi: &Vector3<f64>) -> f64 {
    let cam_pts = box_corners(lo, hi).map(|p| camera.pose.to_camera(&p));
    let clipped = clip_box_near(&cam_pts, VIS_NEAR);
    if clipped.is_empty() {
        return 0.0;
    }
    let k = &camera.intrinsics;
    let projected: Vec<Vector2<f64>> = clipped
        .iter()
        .map(|c| Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
        .collect();
    let hull = convex_hull(&projected);
    let poly = clip_to_rect(&hull, 0.0, 0.0, k.width as f64, k.height as f64);
    polygon_area(&poly).abs().min(k.area())
}

/// Visibility ratio `R = A_proj / (W·H)` of a cell box for one camera.
pub fn visibility_ratio(
    camera: &CameraView,
    cell: usize,
    bounds: &super::Rect,
    z_range: (f64, f64),
) -> VisibilityReport {
    let lo = Vector3::new(bounds.min.x, bounds.min.y, z_range.0);
    let hi = Vector3::new(bounds.max.x, bounds.max.y, z_range.1);
    let area = projected_box_area(camera, &lo, &hi);
    let image_area = camera.intrinsics.area();
    VisibilityReport {
        camera: camera.image_id,
        cell,
        ratio: (area / image_area).clamp(0.0, 1.0),
        projected_area: area,
        image_area,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(x, y)
    }

    #[test]
    fn shoelace_unit_square() {
        let sq = [v(0.0, 0.0), v(1.0, 0.0), v(1.0, 1.0), v(0.0, 1.0)];
        assert_eq!(polygon_area(&sq), 1.0);
        let rev: Vec<_> = sq.iter().rev().copied().collect();
        assert_eq!(polygon_area(&rev), -1.0);
    }

    #[test]
    fn hull_drops_interior_points() {
        let pts = [v(0.0, 0.0), v(2.0, 0.0), v(1.0, 1.0), v(2.0, 2.0), v(0.0, 2.0), v(1.0, 0.0)];
        let h = convex_hull(&pts);
        assert_eq!(h.len(), 4);
        assert_eq!(polygon_area(&h), 4.0);
    }

    #[test]
    fn clipping_a_triangle() {
        let tri = [v(-1.0, -1.0), v(3.0, -1.0), v(-1.0, 3.0)];
        let c = clip_to_rect(&tri, 0.0, 0.0, 2.0, 2.0);
        // the square [0,2]² minus the corner triangle above x + y = 2
        assert!((polygon_area(&c) - 2.0).abs() < 1e-12);
        let away = clip_to_rect(&tri, 10.0, 10.0, 11.0, 11.0);
        assert_eq!(polygon_area(&away), 0.0);
    }
}
