//! Ray / Gaussian intersection.
//!
//! Along a ray `o + t·d` a 3D Gaussian restricts to a 1D Gaussian in `t`.
//! Working in the splat's whitened frame (`r = S⁻¹Rᵀ(o − u)`,
//! `e = S⁻¹Rᵀ d`) its exponent is `−½‖r + t e‖²`, maximized at
//! `t* = −(r·e)/(e·e)` with peak value
//! `ψ = exp(−½(‖r‖² − (r·e)²/‖e‖²))`.
//! The peak is what the renderer composites.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::gaussian::GaussianSplat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Ray {
    /// Builds a ray, normalizing `dir`.
    pub fn new(origin: Vector3<f64>, dir: Vector3<f64>) -> Result<Self> {
        let n = dir.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::InvalidParameter("ray direction has zero length".into()));
        }
        Ok(Self { origin, dir: dir / n })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Peak of the 1D Gaussian along the ray, in `[0, 1]`.
    pub psi: f64,
    /// Ray parameter of the peak.
    pub t_star: f64,
}

impl RayHit {
    pub const MISS: RayHit = RayHit { psi: 0.0, t_star: 0.0 };
}

/// Splat geometry prepared for repeated ray queries.
#[derive(Debug, Clone)]
pub(crate) struct PreparedSplat {
    pub center: Vector3<f64>,
    /// Whitening transform `S⁻¹ Rᵀ`.
    pub whiten: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub scale: Vector3<f64>,
}

impl PreparedSplat {
    pub fn new(splat: &GaussianSplat) -> Self {
        let rotation = splat.rotation_matrix();
        let scale = splat.scale();
        let inv = scale.map(|s| 1.0 / s);
        let whiten = Matrix3::from_diagonal(&inv) * rotation.transpose();
        Self {
            center: splat.center,
            whiten,
            rotation,
            scale,
        }
    }

    #[inline]
    pub fn peak(&self, ray: &Ray) -> PeakTerms {
        let r = self.whiten * (ray.origin - self.center);
        let e = self.whiten * ray.dir;
        PeakTerms::from_whitened(r, e)
    }
}

/// Intermediate quantities of one ray/splat peak evaluation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PeakTerms {
    pub r: Vector3<f64>,
    pub e: Vector3<f64>,
    pub ee: f64,
    pub psi: f64,
    pub t_star: f64,
}

impl PeakTerms {
    #[inline]
    pub fn from_whitened(r: Vector3<f64>, e: Vector3<f64>) -> Self {
        let ee = e.dot(&e);
        if !(ee > 1e-24) {
            return Self {
                r,
                e,
                ee,
                psi: 0.0,
                t_star: 0.0,
            };
        }
        let re = r.dot(&e);
        let t_star = -re / ee;
        let q = (r.dot(&r) - re * re / ee).max(0.0);
        Self {
            r,
            e,
            ee,
            psi: (-0.5 * q).exp(),
            t_star,
        }
    }

    /// Gradients w.r.t. the whitened origin `r` and direction `e`, given
    /// upstream gradients for ψ and t*.
    #[inline]
    pub fn backward(&self, d_psi: f64, d_t: f64) -> (Vector3<f64>, Vector3<f64>) {
        if !(self.ee > 1e-24) {
            return (Vector3::zeros(), Vector3::zeros());
        }
        let t = self.t_star;
        // closest point in the whitened frame
        let m = self.r + self.e * t;
        let d_q = -0.5 * self.psi * d_psi;
        let g_r = m * (2.0 * d_q) - self.e * (d_t / self.ee);
        let g_e = m * (2.0 * d_q * t) - (self.r + self.e * (2.0 * t)) * (d_t / self.ee);
        (g_r, g_e)
    }
}

/// Peak of the splat's density along the ray (opacity not included).
pub fn ray_gaussian_peak(splat: &GaussianSplat, ray: &Ray) -> RayHit {
    let p = PreparedSplat::new(splat).peak(ray);
    RayHit {
        psi: p.psi,
        t_star: p.t_star,
    }
}
