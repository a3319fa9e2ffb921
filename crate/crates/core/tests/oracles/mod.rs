//! Frozen reference oracles for the acceptance tests.
//!
//! Everything here is written independently of the library's numerics:
//! plain loops, dense sampling, Monte-Carlo counting and finite
//! differences. Only plain data types (vectors, images, cameras) are
//! borrowed from the library. Do not change these to make a test pass.
#![allow(dead_code)]

use cellsplat::camera::{CameraView, Intrinsics, Pose};
use cellsplat::gaussian::{GaussianField, GaussianSplat};
use cellsplat::image::Image;
use cellsplat::render::PixelGradient;
use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::Rng;

// ---------------------------------------------------------------- metrics

/// `10·log10(1/MSE)`, one scalar loop, capped at 100 dB.
pub fn psnr_ref(a: &Image, b: &Image) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.data.len() {
        let d = a.data[i] - b.data[i];
        sum += d * d;
    }
    let mse = sum / a.data.len() as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

/// SSIM by brute force: for every valid window position, weighted means,
/// variances and covariance from the 2D Gaussian window directly; mean over
/// positions and channels. Window: 11×11, σ = 1.5, shrunk to
/// `min(11, W, H)` for small images; weights normalized to sum 1.
pub fn ssim_ref(a: &Image, b: &Image) -> f64 {
    let (w, h, nc) = (a.width, a.height, a.channels);
    let k = 11.min(w).min(h);
    let c = (k as f64 - 1.0) / 2.0;
    let mut win = vec![0.0; k * k];
    let mut total = 0.0;
    for y in 0..k {
        for x in 0..k {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            win[y * k + x] = (-r2 / (2.0 * 1.5 * 1.5)).exp();
            total += win[y * k + x];
        }
    }
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..nc {
        for oy in 0..=(h - k) {
            for ox in 0..=(w - k) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let i = ((oy + y) * w + ox + x) * nc + ch;
                        ma += win[y * k + x] * a.data[i];
                        mb += win[y * k + x] * b.data[i];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let i = ((oy + y) * w + ox + x) * nc + ch;
                        let (da, db) = (a.data[i] - ma, b.data[i] - mb);
                        va += win[y * k + x] * da * da;
                        vb += win[y * k + x] * db * db;
                        cov += win[y * k + x] * da * db;
                    }
                }
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

// ---------------------------------------------------------- intersection

/// Inverse covariance from `(center, log_scale, quaternion (w,x,y,z))` via
/// nalgebra's unit quaternion (independent of the library's conversion).
pub fn inverse_covariance(log_scale: &Vector3<f64>, q: &Vector4<f64>) -> Matrix3<f64> {
    let r = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner();
    let s2 = log_scale.map(|v| (2.0 * v).exp());
    let sigma = r * Matrix3::from_diagonal(&s2) * r.transpose();
    sigma.try_inverse().expect("covariance is invertible")
}

/// Peak of `exp(−½ (x−u)ᵀΣ⁻¹(x−u))` over `x = o + t d`, `t ∈ [t0, t1]`:
/// dense sampling at step `1e-4`, then golden-section refinement of the
/// best sample's neighbourhood. Returns `(ψ, t*)`.
pub fn peak_by_sampling(
    center: &Vector3<f64>,
    inv_cov: &Matrix3<f64>,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t0: f64,
    t1: f64,
) -> (f64, f64) {
    let q = |t: f64| {
        let x = origin + dir * t - center;
        (x.transpose() * inv_cov * x)[(0, 0)]
    };
    let h = 1e-4;
    let n = ((t1 - t0) / h).ceil() as usize;
    let (mut best_t, mut best_q) = (t0, q(t0));
    for i in 1..=n {
        let t = t0 + i as f64 * h;
        let v = q(t);
        if v < best_q {
            best_q = v;
            best_t = t;
        }
    }
    // q is a convex quadratic in t: golden section on [best − h, best + h]
    let (mut a, mut b) = (best_t - h, best_t + h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if q(c) < q(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let t = (a + b) / 2.0;
    ((-0.5 * q(t)).exp(), t)
}

// ------------------------------------------------------------ visibility

/// Fraction of the image whose pixel rays hit the axis-aligned box
/// `[lo, hi]` at camera depth ≥ `near`, by counting an `n × n` grid of
/// sample positions (slab test per ray).
pub fn visibility_monte_carlo(cam: &CameraView, lo: &Vector3<f64>, hi: &Vector3<f64>, near: f64, n: usize) -> f64 {
    let k = &cam.intrinsics;
    let rt = cam.pose.rotation.transpose();
    let origin = cam.pose.center();
    let mut hits = 0usize;
    for j in 0..n {
        for i in 0..n {
            let u = (i as f64 + 0.5) / n as f64 * k.width as f64;
            let v = (j as f64 + 0.5) / n as f64 * k.height as f64;
            // camera-space direction with unit Z, so the ray parameter is depth
            let d = rt * Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            let (mut s0, mut s1) = (near, f64::INFINITY);
            let mut ok = true;
            for a in 0..3 {
                if d[a].abs() < 1e-300 {
                    if origin[a] < lo[a] || origin[a] > hi[a] {
                        ok = false;
                        break;
                    }
                    continue;
                }
                let ta = (lo[a] - origin[a]) / d[a];
                let tb = (hi[a] - origin[a]) / d[a];
                s0 = s0.max(ta.min(tb));
                s1 = s1.min(ta.max(tb));
            }
            if ok && s0 <= s1 {
                hits += 1;
            }
        }
    }
    hits as f64 / (n * n) as f64
}

// ------------------------------------------ densification statistic

/// Explicit loop: for every pixel gradient, `‖g_vᵀ J‖` added to its
/// splat; each splat touched in the view counts one observation.
pub fn view_gradient_reference(
    n: usize,
    pixel_grads: &[PixelGradient],
    jacobians: &[Option<Matrix2x3<f64>>],
) -> (Vec<f64>, Vec<u32>) {
    let mut accum = vec![0.0; n];
    let mut touched = vec![false; n];
    for pg in pixel_grads {
        let s = pg.splat as usize;
        if let Some(j) = &jacobians[s] {
            let mut z = [0.0; 3];
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = pg.dl_dp[0] * j[(0, c)] + pg.dl_dp[1] * j[(1, c)];
            }
            accum[s] += (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
            touched[s] = true;
        }
    }
    (accum, touched.into_iter().map(u32::from).collect())
}

// ---------------------------------------------------- finite differences

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + eps;
    let fp = f(&p);
    p[i] = x[i] - eps;
    let fm = f(&p);
    (fp - fm) / (2.0 * eps)
}

/// `|a − n| ≤ rel · max(|a|, |n|) + abs`.
pub fn close(a: f64, n: f64, rel: f64, abs: f64) -> bool {
    (a - n).abs() <= rel * a.abs().max(n.abs()) + abs
}

// ---------------------------------------------------------- scene helpers

pub fn random_quaternion(rng: &mut impl Rng) -> Vector4<f64> {
    loop {
        let q = Vector4::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.2 && n < 1.0 {
            return q / n;
        }
    }
}

/// `n` random splats in `[-0.6, 0.6]² × [-0.3, 0.3]` with positive base
/// colors and small higher-order SH.
pub fn random_field(rng: &mut impl Rng, n: usize, sh_degree: usize) -> GaussianField {
    let k = (sh_degree + 1) * (sh_degree + 1);
    let splats = (0..n)
        .map(|_| {
            let center = Vector3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.3..0.3),
            );
            let scale = Vector3::from_fn(|_, _| rng.random_range(0.08f64..0.3));
            let mut sh = vec![Vector3::zeros(); k];
            sh[0] = Vector3::from_fn(|_, _| rng.random_range(0.2..1.5));
            for c in sh.iter_mut().skip(1) {
                *c = Vector3::from_fn(|_, _| rng.random_range(-0.15..0.15));
            }
            GaussianSplat::new(center, scale, random_quaternion(rng), rng.random_range(0.3..0.9), sh)
        })
        .collect();
    GaussianField::new(splats, sh_degree, 1.0).expect("valid field")
}

/// A square camera about 3 units from the origin looking at it.
pub fn random_camera(rng: &mut impl Rng, id: u32, size: usize) -> CameraView {
    let f = size as f64 * 1.3;
    let k = Intrinsics {
        fx: f,
        fy: f * rng.random_range(0.95..1.05),
        cx: size as f64 / 2.0 + rng.random_range(-0.5..0.5),
        cy: size as f64 / 2.0 + rng.random_range(-0.5..0.5),
        width: size,
        height: size,
    };
    let eye = Vector3::new(
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.8..0.8),
        rng.random_range(2.5..3.5),
    );
    let target = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0);
    CameraView::new(id, k, Pose::look_at(eye, target, Vector3::y()))
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
    Image::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}
