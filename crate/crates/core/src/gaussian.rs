//! Gaussian primitives: parameterization, covariance and the flat parameter
//! layout shared by the optimizer and the gradient code.
//!
//! A splat is stored in unconstrained form so that any gradient step keeps it
//! valid: scales as logarithms, opacity as a pre-sigmoid logit and rotation as
//! a quaternion `(w, x, y, z)` that is normalized on use.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::error::{Error, Result};

/// Quaternion as `(w, x, y, z)`.
pub type Quat = Vector4<f64>;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Number of SH coefficients per color channel for a degree.
pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Inverse of [`sh_coeff_count`]; `None` if `count` is not a perfect square.
pub fn sh_degree_for_count(count: usize) -> Option<usize> {
    let d = (count as f64).sqrt().round() as usize;
    (d >= 1 && d * d == count).then(|| d - 1)
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Normalizes `q`, failing on a zero (or non-finite) norm.
pub fn normalize_quat(q: &Quat) -> Result<Quat> {
    let n = q.norm();
    if !(n > 1e-300) || !n.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "quaternion {:?} has zero norm",
            q.as_slice()
        )));
    }
    Ok(q / n)
}

/// Pulls a gradient w.r.t. the rotation matrix back to the raw (unnormalized)
/// quaternion it was built from.
pub fn quat_matrix_backward(q_raw: &Quat, grad_r: &Matrix3<f64>) -> Quat {
    let n = q_raw.norm();
    let q = q_raw / n;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = |i: usize, j: usize| grad_r[(i, j)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let gq = Vector4::new(dw, dx, dy, dz);
    // d(q/|q|)/dq = (I - q q^T) / |q|
    (gq - q * q.dot(&gq)) / n
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn build_covariance(log_scale: &Vector3<f64>, quat: &Quat) -> Result<Matrix3<f64>> {
    let r = quat_to_matrix(&normalize_quat(quat)?);
    let s2 = log_scale.map(|l| (2.0 * l).exp());
    let rs = r * Matrix3::from_diagonal(&s2);
    let sigma = rs * r.transpose();
    // exact symmetry
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// Offsets of the parameter groups inside a splat's flat parameter vector.
pub mod layout {
    pub const CENTER: usize = 0;
    pub const LOG_SCALE: usize = 3;
    pub const ROTATION: usize = 6;
    pub const OPACITY: usize = 10;
    pub const SH: usize = 11;

    /// Flat parameter count of one splat.
    pub fn stride(sh_count: usize) -> usize {
        SH + 3 * sh_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSplat {
    pub center: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Quat,
    pub opacity_logit: f64,
    /// One RGB triple per SH basis function, degree-major.
    pub sh: Vec<Vector3<f64>>,
}

impl GaussianSplat {
    pub fn new(center: Vector3<f64>, scale: Vector3<f64>, rotation: Quat, opacity: f64, sh: Vec<Vector3<f64>>) -> Self {
        Self {
            center,
            log_scale: scale.map(f64::ln),
            rotation,
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn max_scale(&self) -> f64 {
        self.scale().max()
    }

    /// Rotation matrix of the normalized quaternion. A zero quaternion maps to
    /// the identity here; [`build_covariance`] reports it as an error instead.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        match normalize_quat(&self.rotation) {
            Ok(q) => quat_to_matrix(&q),
            Err(_) => Matrix3::identity(),
        }
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(&self.log_scale, &self.rotation)
    }

    /// Sets the view-independent color (DC term) so that `eval_sh_color`
    /// returns `rgb` along every direction.
    pub fn set_base_color(&mut self, rgb: &Vector3<f64>) {
        self.sh[0] = rgb.map(|c| (c - 0.5) / crate::sh::SH_C0);
    }

    pub fn write_params(&self, out: &mut [f64]) {
        use layout::*;
        out[CENTER..CENTER + 3].copy_from_slice(self.center.as_slice());
        out[LOG_SCALE..LOG_SCALE + 3].copy_from_slice(self.log_scale.as_slice());
        out[ROTATION..ROTATION + 4].copy_from_slice(self.rotation.as_slice());
        out[OPACITY] = self.opacity_logit;
        for (i, c) in self.sh.iter().enumerate() {
            out[SH + 3 * i..SH + 3 * i + 3].copy_from_slice(c.as_slice());
        }
    }

    pub fn read_params(&mut self, src: &[f64]) {
        use layout::*;
        self.center = Vector3::from_column_slice(&src[CENTER..CENTER + 3]);
        self.log_scale = Vector3::from_column_slice(&src[LOG_SCALE..LOG_SCALE + 3]);
        self.rotation = Vector4::from_column_slice(&src[ROTATION..ROTATION + 4]);
        self.opacity_logit = src[OPACITY];
        for (i, c) in self.sh.iter_mut().enumerate() {
            *c = Vector3::from_column_slice(&src[SH + 3 * i..SH + 3 * i + 3]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub splats: Vec<GaussianSplat>,
    pub sh_degree: usize,
    /// Radius of the bounding sphere of the training camera positions.
    pub scene_extent: f64,
}

impl GaussianField {
    pub fn new(splats: Vec<GaussianSplat>, sh_degree: usize, scene_extent: f64) -> Result<Self> {
        let field = Self {
            splats,
            sh_degree,
            scene_extent,
        };
        field.validate()?;
        Ok(field)
    }

    pub fn empty(sh_degree: usize, scene_extent: f64) -> Self {
        Self {
            splats: Vec::new(),
            sh_degree,
            scene_extent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scene_extent > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scene extent must be positive, got {}",
                self.scene_extent
            )));
        }
        if self.sh_degree > 3 {
            return Err(Error::InvalidParameter(format!(
                "SH degree {} unsupported (0..=3)",
                self.sh_degree
            )));
        }
        let n = self.sh_count();
        if let Some(i) = self.splats.iter().position(|s| s.sh.len() != n) {
            return Err(Error::InvalidParameter(format!(
                "splat {i} has {} SH coefficients, degree {} needs {n}",
                self.splats[i].sh.len(),
                self.sh_degree
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn sh_count(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    pub fn param_stride(&self) -> usize {
        layout::stride(self.sh_count())
    }

    pub fn param_count(&self) -> usize {
        self.len() * self.param_stride()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let stride = self.param_stride();
        let mut out = vec![0.0; self.param_count()];
        for (s, chunk) in self.splats.iter().zip(out.chunks_exact_mut(stride)) {
            s.write_params(chunk);
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) {
        let stride = self.param_stride();
        for (s, chunk) in self.splats.iter_mut().zip(params.chunks_exact(stride)) {
            s.read_params(chunk);
        }
    }
}

/// Radius of the bounding sphere (about the centroid) of a point set, with a
/// small floor so a single camera still yields a usable extent.
pub fn bounding_radius(points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 1.0;
    }
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let r = points.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    // 3DGS-style padding
    (r * 1.1).max(1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Table-driven quaternion conversion: R = (w² − |v|²) I + 2 v vᵀ + 2 w [v]×.
    fn oracle_rotation(q: &Quat) -> Matrix3<f64> {
        let q = q / q.norm();
        let w = q[0];
        let v = Vector3::new(q[1], q[2], q[3]);
        let cross = Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0);
        Matrix3::identity() * (w * w - v.dot(&v)) + v * v.transpose() * 2.0 + cross * (2.0 * w)
    }

    fn oracle_covariance(ls: &Vector3<f64>, q: &Quat) -> Matrix3<f64> {
        let r = oracle_rotation(q);
        let mut s = Matrix3::zeros();
        for i in 0..3 {
            s[(i, i)] = ls[i].exp();
        }
        let mut out = Matrix3::zeros();
        let m = r * s;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[(i, j)] += m[(i, k)] * m[(j, k)];
                }
            }
        }
        out
    }

    #[test]
    fn identity_unit_scale_is_identity() {
        let s = build_covariance(&Vector3::zeros(), &Vector4::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(s, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn axis_scaling() {
        let s = build_covariance(&Vector3::new(2f64.ln(), 0.0, 0.0), &Vector4::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(s, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-12);
    }

    #[test]
    fn zero_quaternion_rejected() {
        let err = build_covariance(&Vector3::zeros(), &Vector4::zeros()).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
    }

    #[test]
    fn random_covariances_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let ls = Vector3::from_fn(|_, _| rng.random_range(-2.0..1.0));
            let got = build_covariance(&ls, &q).unwrap();
            let want = oracle_covariance(&ls, &q);
            assert_relative_eq!(got, want, epsilon = 1e-12, max_relative = 1e-10);
        }
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let f = |q: &Quat| quat_to_matrix(&(q / q.norm())).component_mul(&g).sum();
            let analytic = quat_matrix_backward(&q, &g);
            for i in 0..4 {
                let eps = 1e-6;
                let mut qp = q;
                qp[i] += eps;
                let mut qm = q;
                qm[i] -= eps;
                let fd = (f(&qp) - f(&qm)) / (2.0 * eps);
                assert_relative_eq!(analytic[i], fd, epsilon = 1e-7, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn sh_count_inverse() {
        for d in 0..4 {
            assert_eq!(sh_degree_for_count(sh_coeff_count(d)), Some(d));
        }
        assert_eq!(sh_degree_for_count(5), None);
    }

    proptest! {
        #[test]
        fn covariance_symmetric_with_expected_eigenvalues(
            q in prop::array::uniform4(-1.0f64..1.0),
            ls in prop::array::uniform3(-1.5f64..1.5),
        ) {
            let q = Vector4::from(q);
            prop_assume!(q.norm() > 1e-3);
            let ls = Vector3::from(ls);
            let s = build_covariance(&ls, &q).unwrap();
            prop_assert!((s - s.transpose()).abs().max() <= 1e-12);
            let mut eig: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = ls.iter().map(|l| (2.0 * l).exp()).collect();
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
        }

        #[test]
        fn covariance_invariant_to_quaternion_sign(
            q in prop::array::uniform4(-1.0f64..1.0),
            ls in prop::array::uniform3(-1.5f64..1.5),
        ) {
            let q = Vector4::from(q);
            prop_assume!(q.norm() > 1e-3);
            let ls = Vector3::from(ls);
            let a = build_covariance(&ls, &q).unwrap();
            let b = build_covariance(&ls, &(-q)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
