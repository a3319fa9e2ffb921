//! Ray-traced splat compositing.
//!
//! Every pixel casts a ray; each splat contributes its opacity times the peak
//! of its density along that ray. Contributions are sorted by the ray
//! parameter of the peak and blended front to back:
//!
//! ```text
//! ω_k = α_k ψ_k Π_{j<k} (1 − α_j ψ_j)
//! C   = Σ ω_k c_k + (1 − Σ ω_k) · background
//! ```
//!
//! Splats are binned into screen tiles with a conservative bound so each ray
//! only tests nearby splats; the bound never drops a splat that could pass
//! the `αψ ≥ 1/255` gather threshold.

mod backward;
mod normals;

pub use backward::{render_backward, ContribGrad, PixelGradient, RenderGrads, RenderGradients};
pub use normals::depth_to_normal;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::CameraView;
use crate::gaussian::GaussianField;
use crate::image::Image;
use crate::ray::PreparedSplat;
use crate::sh::{eval_sh_with_grad, ShEval};

/// Minimum `αψ` for a splat to be gathered by a ray.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Hits whose peak lies at or before this ray distance are discarded.
pub const NEAR_PLANE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub background: Vector3<f64>,
    /// Keep the per-pixel contribution lists (needed by losses and backward).
    pub capture_contribs: bool,
    pub tile_size: usize,
    /// Disables tile culling; every ray tests every splat.
    pub brute_force: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: Vector3::zeros(),
            capture_contribs: false,
            tile_size: 16,
            brute_force: false,
        }
    }
}

impl RenderOptions {
    pub fn training() -> Self {
        Self {
            capture_contribs: true,
            ..Self::default()
        }
    }
}

/// One splat's share of a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub splat: u32,
    /// Blend weight `ω_k`.
    pub weight: f64,
    /// Camera-Z depth of the peak.
    pub depth: f64,
    /// Ray parameter of the peak.
    pub t_star: f64,
    /// Effective opacity `α_k ψ_k`.
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    /// Alpha-normalized mean camera-Z depth; 0 where nothing was hit.
    pub depth: Image,
    /// Camera-space unit normals; zero where nothing was hit.
    pub normal: Image,
    pub alpha: Image,
    /// Per pixel (row-major), contributions sorted front to back.
    pub contribs: Option<Vec<Vec<Contribution>>>,
    /// Camera-space normal of every splat (captured with the contributions).
    pub splat_normals: Option<Vec<Vector3<f64>>>,
}

/// Per-view splat quantities shared by forward and backward passes.
pub(crate) struct ViewSplat {
    pub geom: PreparedSplat,
    pub opacity: f64,
    pub sh: ShEval,
    /// Unit direction from the camera center to the splat center.
    pub view_dir: Vector3<f64>,
    pub view_dist: f64,
    /// Camera-space normal (shortest axis, facing the camera).
    pub normal: Vector3<f64>,
    pub normal_axis: usize,
    pub normal_sign: f64,
    /// Inclusive pixel bounds `[x0, x1] × [y0, y1]`, `None` if never visible.
    pub bounds: Option<[usize; 4]>,
}

pub(crate) fn prepare_view(field: &GaussianField, camera: &CameraView) -> Vec<ViewSplat> {
    let cam_center = camera.center();
    let cam_rot: Matrix3<f64> = camera.pose.rotation;
    field
        .splats
        .par_iter()
        .map(|s| {
            let geom = PreparedSplat::new(s);
            let opacity = s.opacity();
            let to_splat = s.center - cam_center;
            let view_dist = to_splat.norm().max(1e-12);
            let view_dir = to_splat / view_dist;
            let sh = eval_sh_with_grad(&s.sh, &view_dir);
            let normal_axis = geom.scale.imin();
            let axis = geom.rotation.column(normal_axis).into_owned();
            let normal_sign = if axis.dot(&to_splat) > 0.0 { -1.0 } else { 1.0 };
            let normal = cam_rot * (axis * normal_sign);
            let bounds = splat_bounds(&geom, opacity, camera);
            ViewSplat {
                geom,
                opacity,
                sh,
                view_dir,
                view_dist,
                normal,
                normal_axis,
                normal_sign,
                bounds,
            }
        })
        .collect()
}

/// Conservative pixel bounds of every ray that can gather the splat.
fn splat_bounds(geom: &PreparedSplat, opacity: f64, camera: &CameraView) -> Option<[usize; 4]> {
    let (w, h) = (camera.width(), camera.height());
    let level = 255.0 * opacity;
    if level < 1.0 {
        return None;
    }
    // ψ ≥ 1/(255 α) only inside this Mahalanobis radius
    let radius = (2.0 * level.ln()).sqrt() * geom.scale.max() * (1.0 + 1e-9) + 1e-12;
    let c = camera.pose.to_camera(&geom.center);
    let full = Some([0, w - 1, 0, h - 1]);
    if c.z - radius <= NEAR_PLANE {
        return if c.z + radius <= 0.0 { None } else { full };
    }
    let k = &camera.intrinsics;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for corner in 0..8 {
        let p = c + Vector3::new(
            if corner & 1 == 0 { -radius } else { radius },
            if corner & 2 == 0 { -radius } else { radius },
            if corner & 4 == 0 { -radius } else { radius },
        );
        let u = k.fx * p.x / p.z + k.cx;
        let v = k.fy * p.y / p.z + k.cy;
        x0 = x0.min(u);
        x1 = x1.max(u);
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    // pixel centers sit at +0.5; pad by one pixel
    let lo = |v: f64| (v - 1.5).floor();
    let hi = |v: f64| (v + 0.5).ceil();
    let (px0, px1, py0, py1) = (lo(x0), hi(x1), lo(y0), hi(y1));
    if px1 < 0.0 || py1 < 0.0 || px0 > (w - 1) as f64 || py0 > (h - 1) as f64 {
        return None;
    }
    let clamp = |v: f64, max: usize| v.clamp(0.0, max as f64) as usize;
    Some([clamp(px0, w - 1), clamp(px1, w - 1), clamp(py0, h - 1), clamp(py1, h - 1)])
}

pub(crate) struct TileGrid {
    pub size: usize,
    pub nx: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn build(splats: &[ViewSplat], camera: &CameraView, size: usize, brute_force: bool) -> Self {
        let size = size.max(1);
        let nx = camera.width().div_ceil(size);
        let ny = camera.height().div_ceil(size);
        let mut lists = vec![Vec::new(); nx * ny];
        for (i, s) in splats.iter().enumerate() {
            let b = if brute_force {
                Some([0, camera.width() - 1, 0, camera.height() - 1])
            } else {
                s.bounds
            };
            let Some([x0, x1, y0, y1]) = b else { continue };
            for ty in y0 / size..=y1 / size {
                for tx in x0 / size..=x1 / size {
                    lists[ty * nx + tx].push(i as u32);
                }
            }
        }
        Self { size, nx, lists }
    }

    pub fn pixels(&self, tile: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.nx, tile / self.nx);
        let xs = tx * self.size..((tx + 1) * self.size).min(width);
        let ys = ty * self.size..((ty + 1) * self.size).min(height);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }
}

/// Gathers and sorts the splats hit by one pixel's ray and composites them.
pub(crate) fn composite_pixel(
    splats: &[ViewSplat],
    candidates: &[u32],
    camera: &CameraView,
    x: usize,
    y: usize,
    scratch: &mut Vec<(f64, u32, f64)>,
    out: &mut Vec<Contribution>,
) -> f64 {
    let (ray, cos) = camera.pixel_ray(x, y);
    scratch.clear();
    for &i in candidates {
        let s = &splats[i as usize];
        let p = s.geom.peak(&ray);
        let a = s.opacity * p.psi;
        if p.t_star > NEAR_PLANE && a >= MIN_ALPHA {
            scratch.push((p.t_star, i, a));
        }
    }
    scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    out.clear();
    let mut t = 1.0;
    for &(t_star, i, a) in scratch.iter() {
        out.push(Contribution {
            splat: i,
            weight: a * t,
            depth: t_star * cos,
            t_star,
            alpha: a,
            transmittance: t,
        });
        t *= 1.0 - a;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    t
}

struct TileResult {
    pixels: Vec<(usize, usize, [f64; 8])>,
    contribs: Vec<Vec<Contribution>>,
}

pub fn render(field: &GaussianField, camera: &CameraView, opts: &RenderOptions) -> RenderOutput {
    let (w, h) = (camera.width(), camera.height());
    let splats = prepare_view(field, camera);
    let grid = TileGrid::build(&splats, camera, opts.tile_size, opts.brute_force);
    let bg = opts.background;

    let tiles: Vec<TileResult> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile| {
            let mut scratch = Vec::new();
            let mut list = Vec::new();
            let mut res = TileResult {
                pixels: Vec::new(),
                contribs: Vec::new(),
            };
            for (x, y) in grid.pixels(tile, w, h) {
                let t_final = composite_pixel(&splats, &grid.lists[tile], camera, x, y, &mut scratch, &mut list);
                let mut color = Vector3::zeros();
                let mut wsum = 0.0;
                let mut zsum = 0.0;
                let mut nsum = Vector3::zeros();
                for c in &list {
                    let s = &splats[c.splat as usize];
                    color += s.sh.rgb * c.weight;
                    wsum += c.weight;
                    zsum += c.weight * c.depth;
                    nsum += s.normal * c.weight;
                }
                color += bg * t_final;
                let depth = if list.is_empty() { 0.0 } else { zsum / wsum.max(1e-8) };
                let nn = nsum.norm();
                let normal = if nn > 1e-12 { nsum / nn } else { Vector3::zeros() };
                res.pixels.push((
                    x,
                    y,
                    [color.x, color.y, color.z, depth, normal.x, normal.y, normal.z, wsum],
                ));
                if opts.capture_contribs {
                    res.contribs.push(list.clone());
                }
            }
            res
        })
        .collect();

    let mut color = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut normal = Image::new(w, h, 3);
    let mut alpha = Image::new(w, h, 1);
    let mut contribs = opts.capture_contribs.then(|| vec![Vec::new(); w * h]);
    for tile in tiles {
        let mut tile_contribs = tile.contribs.into_iter();
        for (x, y, v) in tile.pixels {
            for c in 0..3 {
                color.set(x, y, c, v[c]);
                normal.set(x, y, c, v[4 + c]);
            }
            depth.set(x, y, 0, v[3]);
            alpha.set(x, y, 0, v[7]);
            if let Some(all) = contribs.as_mut() {
                all[y * w + x] = tile_contribs.next().unwrap_or_default();
            }
        }
    }
    let splat_normals = opts.capture_contribs.then(|| splats.iter().map(|s| s.normal).collect());
    RenderOutput {
        color,
        depth,
        normal,
        alpha,
        contribs,
        splat_normals,
    }
}
