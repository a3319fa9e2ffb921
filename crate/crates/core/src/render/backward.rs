//! Reverse-mode pass through the compositor.
//!
//! Any loss that depends on the rendered color, depth and alpha images and on
//! the per-contribution weights, depths and splat normals is pulled back to
//! the splat parameters. Weight gradients are propagated through the
//! front-to-back product with a back-to-front suffix sum, so no division by
//! `1 − αψ` is ever needed.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{prepare_view, Contribution, RenderOptions, RenderOutput, ViewSplat};
use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::gaussian::{layout, quat_matrix_backward, GaussianField};
use crate::image::Image;

/// Direct gradient of the loss w.r.t. one contribution's blend weight,
/// camera-Z depth and camera-space splat normal.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ContribGrad {
    pub weight: f64,
    pub depth: f64,
    pub normal: Vector3<f64>,
}

/// Upstream gradients for one rendered view.
#[derive(Debug, Clone, Copy)]
pub struct RenderGrads<'a> {
    pub color: &'a Image,
    pub depth: Option<&'a Image>,
    pub alpha: Option<&'a Image>,
    /// Parallel to `RenderOutput::contribs`.
    pub contribs: Option<&'a [Vec<ContribGrad>]>,
}

/// Screen-space gradient of the color loss w.r.t. a splat's projected center
/// at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelGradient {
    pub splat: u32,
    pub pixel: u32,
    pub dl_dp: Vector2<f64>,
}

#[derive(Debug, Clone)]
pub struct RenderGradients {
    /// Flat gradient, laid out like [`GaussianField::to_flat`].
    pub params: Vec<f64>,
    /// Per (splat, pixel) screen-space color gradients; empty unless requested.
    pub pixel_grads: Vec<PixelGradient>,
    /// Projection Jacobian of each splat center for this view.
    pub jacobians: Vec<Option<Matrix2x3<f64>>>,
}

const ACC: usize = 19;

/// Per-splat accumulator layout: dL/dM (9, row-major), dL/du (3),
/// dL/dcolor (3), dL/dnormal (3), dL/dlogit (1).
#[inline]
fn acc_add(acc: &mut [f64], gm: &Matrix3<f64>, gu: &Vector3<f64>, gc: &Vector3<f64>, gn: &Vector3<f64>, gl: f64) {
    for i in 0..3 {
        for j in 0..3 {
            acc[3 * i + j] += gm[(i, j)];
        }
        acc[9 + i] += gu[i];
        acc[12 + i] += gc[i];
        acc[15 + i] += gn[i];
    }
    acc[18] += gl;
}

struct TileOut {
    acc: Vec<f64>,
    pixel_grads: Vec<PixelGradient>,
}

#[allow(clippy::too_many_arguments)]
fn pixel_backward(
    splats: &[ViewSplat],
    camera: &CameraView,
    bg: &Vector3<f64>,
    list: &[Contribution],
    pixel: usize,
    out: &RenderOutput,
    grads: &RenderGrads,
    jacobians: &[Option<Matrix2x3<f64>>],
    collect: bool,
    tile: &mut TileOut,
    gw: &mut Vec<f64>,
    gw_color: &mut Vec<f64>,
) {
    let w = camera.width();
    let (x, y) = (pixel % w, pixel / w);
    let gc = Vector3::from_column_slice(grads.color.pixel(x, y));
    let ga = grads.alpha.map_or(0.0, |a| a.get(x, y, 0));
    let gd = grads.depth.map_or(0.0, |d| d.get(x, y, 0));
    let extra = grads.contribs.map(|c| &c[pixel]);

    let wsum: f64 = list.iter().map(|c| c.weight).sum();
    let denom = wsum.max(1e-8);
    let depth = out.depth.get(x, y, 0);

    gw.clear();
    gw_color.clear();
    for (k, c) in list.iter().enumerate() {
        let s = &splats[c.splat as usize];
        let g_col = (s.sh.rgb - bg).dot(&gc);
        let g_depth = if wsum > 1e-8 { (c.depth - depth) / wsum } else { c.depth / denom };
        let e = extra.map_or(0.0, |e| e[k].weight);
        gw.push(g_col + ga + gd * g_depth + e);
        gw_color.push(g_col);
    }

    let (ray, cos) = camera.pixel_ray(x, y);
    let mut suffix = 0.0;
    let mut suffix_color = 0.0;
    for k in (0..list.len()).rev() {
        let c = &list[k];
        let s = &splats[c.splat as usize];
        let d_alpha = c.transmittance * (gw[k] - suffix);
        let d_alpha_color = c.transmittance * (gw_color[k] - suffix_color);
        suffix = gw[k] * c.alpha + (1.0 - c.alpha) * suffix;
        suffix_color = gw_color[k] * c.alpha + (1.0 - c.alpha) * suffix_color;

        let p = s.geom.peak(&ray);
        let g_depth = gd * c.weight / denom + extra.map_or(0.0, |e| e[k].depth);
        let d_psi = s.opacity * d_alpha;
        let d_logit = p.psi * s.opacity * (1.0 - s.opacity) * d_alpha;
        let (g_r, g_e) = p.backward(d_psi, cos * g_depth);
        let offset = ray.origin - s.geom.center;
        let gm = g_r * offset.transpose() + g_e * ray.dir.transpose();
        let gu = -(s.geom.whiten.transpose() * g_r);
        let g_color = gc * c.weight;
        let g_normal = extra.map_or(Vector3::zeros(), |e| e[k].normal);
        let base = c.splat as usize * ACC;
        acc_add(&mut tile.acc[base..base + ACC], &gm, &gu, &g_color, &g_normal, d_logit);

        if collect {
            if let Some(j) = &jacobians[c.splat as usize] {
                let (g_r, _) = p.backward(s.opacity * d_alpha_color, 0.0);
                let gu_color = -(s.geom.whiten.transpose() * g_r);
                if let Some(dl_dp) = screen_gradient(j, &gu_color) {
                    tile.pixel_grads.push(PixelGradient {
                        splat: c.splat,
                        pixel: pixel as u32,
                        dl_dp,
                    });
                }
            }
        }
    }
}

/// Screen-space gradient `g_p` with `g_pᵀ J` equal to the projection of the
/// world-space center gradient onto the row space of `J`.
fn screen_gradient(j: &Matrix2x3<f64>, g_world: &Vector3<f64>) -> Option<Vector2<f64>> {
    let jjt = j * j.transpose();
    jjt.try_inverse().map(|inv| inv * (j * g_world))
}

pub fn render_backward(
    field: &GaussianField,
    camera: &CameraView,
    opts: &RenderOptions,
    out: &RenderOutput,
    grads: &RenderGrads,
    collect_pixel_grads: bool,
) -> Result<RenderGradients> {
    let contribs = out
        .contribs
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("backward needs a render with captured contributions".into()))?;
    let (w, h) = (camera.width(), camera.height());
    grads.color.check_shape(&out.color, "color gradient")?;
    if let Some(d) = grads.depth {
        d.check_shape(&out.depth, "depth gradient")?;
    }
    if let Some(a) = grads.alpha {
        a.check_shape(&out.alpha, "alpha gradient")?;
    }
    if let Some(c) = grads.contribs {
        if c.len() != contribs.len() || c.iter().zip(contribs).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("contribution gradients do not match render".into()));
        }
    }

    let splats = prepare_view(field, camera);
    let jacobians: Vec<Option<Matrix2x3<f64>>> =
        field.splats.iter().map(|s| camera.projection_jacobian(&s.center)).collect();
    let n = field.len();
    let bg = opts.background;
    let rows_per_chunk = opts.tile_size.max(1);
    let chunks = h.div_ceil(rows_per_chunk);

    let tiles: Vec<TileOut> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut tile = TileOut {
                acc: vec![0.0; n * ACC],
                pixel_grads: Vec::new(),
            };
            let (mut gw, mut gw_color) = (Vec::new(), Vec::new());
            let y_end = ((chunk + 1) * rows_per_chunk).min(h);
            for y in chunk * rows_per_chunk..y_end {
                for x in 0..w {
                    let pixel = y * w + x;
                    let list = &contribs[pixel];
                    if list.is_empty() {
                        continue;
                    }
                    pixel_backward(
                        &splats,
                        camera,
                        &bg,
                        list,
                        pixel,
                        out,
                        grads,
                        &jacobians,
                        collect_pixel_grads,
                        &mut tile,
                        &mut gw,
                        &mut gw_color,
                    );
                }
            }
            tile
        })
        .collect();

    // fixed-order reduction keeps results independent of thread scheduling
    let mut acc = vec![0.0; n * ACC];
    let mut pixel_grads = Vec::new();
    for t in tiles {
        for (a, b) in acc.iter_mut().zip(&t.acc) {
            *a += b;
        }
        pixel_grads.extend(t.pixel_grads);
    }

    let stride = field.param_stride();
    let mut params = vec![0.0; n * stride];
    let cam_rot_t = camera.pose.rotation.transpose();
    for (i, ((splat, vs), out)) in field
        .splats
        .iter()
        .zip(&splats)
        .zip(params.chunks_exact_mut(stride))
        .enumerate()
    {
        let a = &acc[i * ACC..(i + 1) * ACC];
        let gm = Matrix3::from_row_slice(&a[0..9]);
        let mut gu = Vector3::from_column_slice(&a[9..12]);
        let gc = Vector3::from_column_slice(&a[12..15]);
        let gn = Vector3::from_column_slice(&a[15..18]);

        // color: SH coefficients and view direction
        let gc_active = Vector3::from_fn(|c, _| if vs.sh.active[c] { gc[c] } else { 0.0 });
        for (j, b) in vs.sh.basis.iter().take(splat.sh.len()).enumerate() {
            for c in 0..3 {
                out[layout::SH + 3 * j + c] = b * gc_active[c];
            }
        }
        let g_dir = vs.sh.d_dir.transpose() * gc_active;
        let v = vs.view_dir;
        gu += (g_dir - v * v.dot(&g_dir)) / vs.view_dist;

        // whitening matrix M = S⁻¹ Rᵀ
        let m = &vs.geom.whiten;
        let mut g_rot = Matrix3::zeros();
        for r in 0..3 {
            let s = vs.geom.scale[r];
            let mut g_ls = 0.0;
            for c in 0..3 {
                g_rot[(c, r)] += gm[(r, c)] / s;
                g_ls -= gm[(r, c)] * m[(r, c)];
            }
            out[layout::LOG_SCALE + r] = g_ls;
        }
        // normal = R_cam · (sign · R[:, axis])
        let g_axis = cam_rot_t * gn * vs.normal_sign;
        for r in 0..3 {
            g_rot[(r, vs.normal_axis)] += g_axis[r];
        }
        let g_q = if splat.rotation.norm() > 1e-300 {
            quat_matrix_backward(&splat.rotation, &g_rot)
        } else {
            Default::default()
        };

        out[layout::CENTER..layout::CENTER + 3].copy_from_slice(gu.as_slice());
        out[layout::ROTATION..layout::ROTATION + 4].copy_from_slice(g_q.as_slice());
        out[layout::OPACITY] = a[18];
    }

    check_finite(&params, stride)?;
    Ok(RenderGradients {
        params,
        pixel_grads,
        jacobians,
    })
}

pub(crate) fn check_finite(params: &[f64], stride: usize) -> Result<()> {
    for chunk in params.chunks_exact(stride) {
        for (i, v) in chunk.iter().enumerate() {
            if !v.is_finite() {
                let group = match i {
                    i if i < layout::LOG_SCALE => "center",
                    i if i < layout::ROTATION => "log_scale",
                    i if i < layout::OPACITY => "rotation",
                    layout::OPACITY => "opacity",
                    _ => "sh",
                };
                return Err(Error::NonFiniteGradient(group));
            }
        }
    }
    Ok(())
}
