//! Pinhole cameras, world-to-camera poses and the pose file format.
//!
//! A pose file holds one or more blocks, each a 4×4 row-major world-to-camera
//! matrix (16 whitespace-separated numbers) followed by a line
//! `fx fy cx cy W H`. A trajectory file is simply several blocks.

use std::fmt::Write as _;

use nalgebra::{Matrix2x3, Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::ray::Ray;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid pinhole intrinsics {self:?}")))
        }
    }

    /// Camera-space direction (z = 1) through the center of pixel `(x, y)`.
    #[inline]
    pub fn unproject(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x + 0.5 - self.cx) / self.fx, (y + 0.5 - self.cy) / self.fy, 1.0)
    }

    pub fn area(&self) -> f64 {
        (self.width * self.height) as f64
    }
}

/// Rigid world-to-camera transform `x_cam = R x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose of a camera at `eye` looking at `target`, with image "down"
    /// (camera +Y) as close as possible to `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let fwd = (target - eye).normalize();
        let mut right = fwd.cross(&up);
        if right.norm() < 1e-9 {
            right = fwd.cross(&Vector3::x());
        }
        let right = right.normalize();
        let down = fwd.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    /// From a COLMAP-style world-to-camera quaternion `(w, x, y, z)` and translation.
    pub fn from_quat_translation(q: [f64; 4], t: Vector3<f64>) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        Self {
            rotation: uq.to_rotation_matrix().into_inner(),
            translation: t,
        }
    }

    /// World-to-camera rotation as a quaternion `(w, x, y, z)` with `w ≥ 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let mut c = [q.w, q.i, q.j, q.k];
        if c[0] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        c
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Applies a world-frame rotation `A` (x' = A x): the camera keeps
    /// observing the same rotated scene.
    pub fn rotate_world(&self, a: &Matrix3<f64>) -> Self {
        Self {
            rotation: self.rotation * a.transpose(),
            translation: self.translation,
        }
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub image_id: u32,
    pub name: String,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    /// Ground-truth image, when loaded.
    pub image: Option<Image>,
}

impl CameraView {
    pub fn new(image_id: u32, intrinsics: Intrinsics, pose: Pose) -> Self {
        Self {
            image_id,
            name: format!("{image_id:05}.png"),
            intrinsics,
            pose,
            image: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.pose.orthonormality_error() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "camera {} rotation is not orthonormal",
                self.image_id
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    /// World ray through the center of pixel `(x, y)`, plus the cosine
    /// between that ray and the optical axis (converts ray distance to
    /// camera-Z depth).
    pub fn pixel_ray(&self, x: usize, y: usize) -> (Ray, f64) {
        let d_cam = self.intrinsics.unproject(x as f64, y as f64);
        let n = d_cam.norm();
        let dir = self.pose.rotation.transpose() * (d_cam / n);
        (
            Ray {
                origin: self.center(),
                dir,
            },
            1.0 / n,
        )
    }

    /// Pixel coordinates of a world point (continuous, pixel centers at +0.5),
    /// or `None` behind the near plane.
    pub fn project(&self, p: &Vector3<f64>, near: f64) -> Option<Vector2<f64>> {
        let c = self.pose.to_camera(p);
        (c.z > near).then(|| {
            Vector2::new(
                self.intrinsics.fx * c.x / c.z + self.intrinsics.cx,
                self.intrinsics.fy * c.y / c.z + self.intrinsics.cy,
            )
        })
    }

    /// Jacobian of [`CameraView::project`] w.r.t. the world point.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Option<Matrix2x3<f64>> {
        let c = self.pose.to_camera(p);
        if c.z <= 1e-9 {
            return None;
        }
        let k = &self.intrinsics;
        let iz = 1.0 / c.z;
        let j = Matrix2x3::new(
            k.fx * iz,
            0.0,
            -k.fx * c.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * c.y * iz * iz,
        );
        Some(j * self.pose.rotation)
    }
}

/// Field-of-view to focal length: `f = W / (2 tan(fov / 2))`.
pub fn focal_from_fov(width: usize, fov_radians: f64) -> f64 {
    width as f64 / (2.0 * (fov_radians / 2.0).tan())
}

pub fn format_pose_block(pose: &Pose, k: &Intrinsics) -> String {
    let m = pose.matrix();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:?}", m[(r, c)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    let _ = writeln!(s, "{:?} {:?} {:?} {:?} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    s
}

/// Parses a pose or trajectory file into `(pose, intrinsics)` frames.
pub fn parse_pose_file(text: &str) -> Result<Vec<(Pose, Intrinsics)>> {
    let tokens: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim_start().starts_with('#'))
        .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)))
        .collect();
    if tokens.is_empty() || tokens.len() % 22 != 0 {
        return Err(Error::parse(
            "pose file",
            tokens.last().map_or(0, |t| t.0),
            format!("expected blocks of 22 numbers, found {} tokens", tokens.len()),
        ));
    }
    let num = |(line, t): (usize, &str)| -> Result<f64> {
        t.parse::<f64>()
            .map_err(|_| Error::parse("pose file", line, format!("bad number `{t}`")))
    };
    let mut frames = Vec::new();
    for block in tokens.chunks_exact(22) {
        let mut m = Matrix4::zeros();
        for i in 0..16 {
            m[(i / 4, i % 4)] = num(block[i])?;
        }
        let dim = |i: usize| -> Result<usize> {
            let (line, t) = block[i];
            t.parse::<usize>()
                .map_err(|_| Error::parse("pose file", line, format!("bad image size `{t}`")))
        };
        let k = Intrinsics {
            fx: num(block[16])?,
            fy: num(block[17])?,
            cx: num(block[18])?,
            cy: num(block[19])?,
            width: dim(20)?,
            height: dim(21)?,
        };
        k.validate()?;
        let pose = Pose::from_matrix(&m);
        if pose.orthonormality_error() > 1e-6 {
            return Err(Error::parse("pose file", block[0].0, "rotation block is not orthonormal"));
        }
        frames.push((pose, k));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cam() -> CameraView {
        let k = Intrinsics {
            fx: 100.0,
            fy: 110.0,
            cx: 50.0,
            cy: 40.0,
            width: 100,
            height: 80,
        };
        CameraView::new(1, k, Pose::look_at(Vector3::new(1.0, -2.0, 3.0), Vector3::zeros(), Vector3::z()))
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let c = cam();
        let p = c.pose.to_camera(&Vector3::zeros());
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-12);
        assert!(p.z > 0.0);
        assert!(c.pose.orthonormality_error() < 1e-12);
        assert!(c.pose.rotation.determinant() > 0.0);
    }

    #[test]
    fn pixel_ray_reprojects_to_pixel_center() {
        let c = cam();
        let (ray, cos) = c.pixel_ray(13, 57);
        let p = ray.at(4.0);
        let px = c.project(&p, 0.0).unwrap();
        assert_relative_eq!(px, Vector2::new(13.5, 57.5), epsilon = 1e-9);
        assert_relative_eq!(c.pose.to_camera(&p).z, 4.0 * cos, epsilon = 1e-9);
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let c = cam();
        let p = Vector3::new(0.2, 0.1, -0.3);
        let j = c.projection_jacobian(&p).unwrap();
        for i in 0..3 {
            let mut a = p;
            a[i] += 1e-6;
            let mut b = p;
            b[i] -= 1e-6;
            let fd = (c.project(&a, 0.0).unwrap() - c.project(&b, 0.0).unwrap()) / 2e-6;
            assert_relative_eq!(j.column(i).into_owned(), fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn pose_file_round_trip() {
        let c = cam();
        let text = format_pose_block(&c.pose, &c.intrinsics) + &format_pose_block(&Pose::identity(), &c.intrinsics);
        let frames = parse_pose_file(&text).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].0, c.pose);
        assert_eq!(frames[0].1, c.intrinsics);
    }

    #[test]
    fn pose_file_rejects_truncated_block() {
        assert!(parse_pose_file("1 0 0 0\n0 1 0 0\n").is_err());
    }

    #[test]
    fn quaternion_round_trip() {
        let c = cam();
        let q = c.pose.quaternion();
        let back = Pose::from_quat_translation(q, c.pose.translation);
        assert_relative_eq!(back.rotation, c.pose.rotation, epsilon = 1e-12);
    }

    #[test]
    fn fov_to_focal() {
        assert_relative_eq!(focal_from_fov(200, std::f64::consts::FRAC_PI_2), 100.0, epsilon = 1e-12);
    }
}
