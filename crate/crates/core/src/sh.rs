//! Real spherical harmonics up to degree 3, in the sign convention used by
//! common splat files, so colors interoperate with other viewers.

use nalgebra::{Matrix3, Vector3};

pub const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Basis values at a unit direction, and optionally their gradients with
/// respect to the (unit) direction components.
pub fn sh_basis(degree: usize, dir: &Vector3<f64>, grads: Option<&mut [Vector3<f64>; 16]>) -> [f64; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    let (xx, yy, zz, xy, yz, xz) = (x * x, y * y, z * z, x * y, y * z, x * z);
    if degree >= 2 {
        b[4] = SH_C2[0] * xy;
        b[5] = SH_C2[1] * yz;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * xz;
        b[8] = SH_C2[4] * (xx - yy);
    }
    if degree >= 3 {
        b[9] = SH_C3[0] * y * (3.0 * xx - yy);
        b[10] = SH_C3[1] * xy * z;
        b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        b[14] = SH_C3[5] * z * (xx - yy);
        b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    }
    if let Some(g) = grads {
        *g = [Vector3::zeros(); 16];
        if degree >= 1 {
            g[1] = Vector3::new(0.0, -SH_C1, 0.0);
            g[2] = Vector3::new(0.0, 0.0, SH_C1);
            g[3] = Vector3::new(-SH_C1, 0.0, 0.0);
        }
        if degree >= 2 {
            g[4] = SH_C2[0] * Vector3::new(y, x, 0.0);
            g[5] = SH_C2[1] * Vector3::new(0.0, z, y);
            g[6] = SH_C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
            g[7] = SH_C2[3] * Vector3::new(z, 0.0, x);
            g[8] = SH_C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
        }
        if degree >= 3 {
            g[9] = SH_C3[0] * Vector3::new(6.0 * xy, 3.0 * xx - 3.0 * yy, 0.0);
            g[10] = SH_C3[1] * Vector3::new(yz, xz, xy);
            g[11] = SH_C3[2] * Vector3::new(-2.0 * xy, 4.0 * zz - xx - 3.0 * yy, 8.0 * yz);
            g[12] = SH_C3[3] * Vector3::new(-6.0 * xz, -6.0 * yz, 6.0 * zz - 3.0 * xx - 3.0 * yy);
            g[13] = SH_C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * xy, 8.0 * xz);
            g[14] = SH_C3[5] * Vector3::new(2.0 * xz, -2.0 * yz, xx - yy);
            g[15] = SH_C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * xy, 0.0);
        }
    }
    b
}

fn degree_of(len: usize) -> usize {
    match len {
        0 | 1 => 0,
        2..=4 => 1,
        5..=9 => 2,
        _ => 3,
    }
}

/// View-dependent color: `max(Σ basis·coeff + 0.5, 0)` per channel.
pub fn eval_sh_color(coeffs: &[Vector3<f64>], view_dir: &Vector3<f64>) -> Vector3<f64> {
    let basis = sh_basis(degree_of(coeffs.len()), view_dir, None);
    let mut rgb = Vector3::repeat(0.5);
    for (c, b) in coeffs.iter().zip(basis.iter()) {
        rgb += c * *b;
    }
    rgb.map(|v| v.max(0.0))
}

/// Color plus what the backward pass needs: the basis values, the clamp mask
/// and the Jacobian of the unclamped color w.r.t. the unit view direction.
pub(crate) struct ShEval {
    pub rgb: Vector3<f64>,
    pub basis: [f64; 16],
    pub active: [bool; 3],
    /// Row `c` is d(rgb_c)/d(dir).
    pub d_dir: Matrix3<f64>,
}

pub(crate) fn eval_sh_with_grad(coeffs: &[Vector3<f64>], view_dir: &Vector3<f64>) -> ShEval {
    let mut g = [Vector3::zeros(); 16];
    let basis = sh_basis(degree_of(coeffs.len()), view_dir, Some(&mut g));
    let mut raw = Vector3::repeat(0.5);
    let mut d_dir = Matrix3::zeros();
    for (i, c) in coeffs.iter().enumerate() {
        raw += c * basis[i];
        d_dir += c * g[i].transpose();
    }
    let active = [raw.x > 0.0, raw.y > 0.0, raw.z > 0.0];
    ShEval {
        rgb: raw.map(|v| v.max(0.0)),
        basis,
        active,
        d_dir,
    }
}
