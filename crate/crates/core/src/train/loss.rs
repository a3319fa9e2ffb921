//! Composite training loss `L = L_c + λ1·L_d + λ2·L_n` with
//! `L_c = L1(I_a, I) + λ3·D-SSIM(I_r, I)`.
//!
//! * `L_d`: per pixel `Σ_{i<j} ω_i ω_j |z_i − z_j|` over the pixel's
//!   contributions (camera-Z depths), averaged over all pixels.
//! * `L_n`: per pixel `Σ_i ω_i (1 − n_i · N_D)` with `n_i` the splat's
//!   camera-space normal and `N_D` the depth-derived normal, averaged over
//!   all pixels. `N_D` is a constant target supplied by the caller; pixels
//!   where it is undefined (zero) contribute nothing.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{d_ssim, d_ssim_with_grad};
use crate::render::{ContribGrad, RenderOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Depth distortion weight λ1.
    pub lambda1: f64,
    /// Normal consistency weight λ2.
    pub lambda2: f64,
    /// D-SSIM weight λ3.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 100.0,
            lambda2: 0.05,
            lambda3: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParameter(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub normal: f64,
    pub l1: f64,
    pub dssim: f64,
}

/// Gradients of the total loss w.r.t. its direct inputs.
#[derive(Debug, Clone)]
pub struct LossGradients {
    /// `dL/dI_a` (L1 term).
    pub adjusted: Image,
    /// `dL/dI_r` from the D-SSIM term only.
    pub rendered: Image,
    /// Per-contribution gradients (L_d and L_n), parallel to the render's
    /// contribution lists.
    pub contribs: Vec<Vec<ContribGrad>>,
}

fn inputs<'a>(render: &'a RenderOutput) -> Result<(&'a [Vec<crate::render::Contribution>], &'a [Vector3<f64>])> {
    let contribs = render
        .contribs
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("loss needs a render with captured contributions".into()))?;
    let normals = render
        .splat_normals
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("loss needs captured splat normals".into()))?;
    Ok((contribs, normals))
}

/// Loss value only.
pub fn compute_loss(
    render: &RenderOutput,
    adjusted: &Image,
    gt: &Image,
    normal_target: &Image,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(evaluate(render, adjusted, gt, normal_target, weights, false)?.0)
}

/// Loss value and gradients.
pub fn compute_loss_with_grad(
    render: &RenderOutput,
    adjusted: &Image,
    gt: &Image,
    normal_target: &Image,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossGradients)> {
    let (b, g) = evaluate(render, adjusted, gt, normal_target, weights, true)?;
    Ok((b, g.expect("gradients requested")))
}

fn evaluate(
    render: &RenderOutput,
    adjusted: &Image,
    gt: &Image,
    normal_target: &Image,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<LossGradients>)> {
    weights.validate()?;
    let rendered = &render.color;
    adjusted.check_shape(gt, "adjusted image vs ground truth")?;
    rendered.check_shape(gt, "rendered image vs ground truth")?;
    if normal_target.width != gt.width || normal_target.height != gt.height || normal_target.channels != 3 {
        return Err(Error::Shape("normal target must be a W×H×3 image".into()));
    }
    let (contribs, normals) = inputs(render)?;
    let pixels = gt.width * gt.height;
    if contribs.len() != pixels {
        return Err(Error::Shape("contribution lists do not match the image".into()));
    }

    // color: L1 on the adjusted image, D-SSIM on the raw render
    let n = adjusted.data.len() as f64;
    let l1 = adjusted.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let (dssim, dssim_grad) = if want_grad {
        let (v, g) = d_ssim_with_grad(rendered, gt)?;
        (v, Some(g))
    } else {
        (d_ssim(rendered, gt)?, None)
    };
    let color = l1 + weights.lambda3 * dssim;

    let mut depth_sum = 0.0;
    let mut normal_sum = 0.0;
    let mut contrib_grads: Vec<Vec<ContribGrad>> = if want_grad {
        contribs.iter().map(|l| vec![ContribGrad::default(); l.len()]).collect()
    } else {
        Vec::new()
    };
    let inv_p = 1.0 / pixels as f64;
    let mut order = Vec::new();
    for (p, list) in contribs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        // depth distortion via prefix sums over depth-sorted contributions
        order.clear();
        order.extend(0..list.len());
        order.sort_by(|&a, &b| list[a].depth.total_cmp(&list[b].depth).then(a.cmp(&b)));
        let total_w: f64 = list.iter().map(|c| c.weight).sum();
        let total_wz: f64 = list.iter().map(|c| c.weight * c.depth).sum();
        let (mut w_before, mut wz_before) = (0.0, 0.0);
        for &k in &order {
            let c = &list[k];
            let (w_after, wz_after) = (total_w - w_before - c.weight, total_wz - wz_before - c.weight * c.depth);
            // pairs (j before k): ω_j ω_k (z_k − z_j)
            depth_sum += c.weight * (c.depth * w_before - wz_before);
            if want_grad {
                let g = &mut contrib_grads[p][k];
                g.weight += weights.lambda1 * inv_p * (c.depth * w_before - wz_before + wz_after - c.depth * w_after);
                g.depth += weights.lambda1 * inv_p * c.weight * (w_before - w_after);
            }
            w_before += c.weight;
            wz_before += c.weight * c.depth;
        }

        let target = Vector3::from_column_slice(normal_target.pixel(p % gt.width, p / gt.width));
        if target.norm_squared() == 0.0 {
            continue;
        }
        for (k, c) in list.iter().enumerate() {
            let nk = normals[c.splat as usize];
            normal_sum += c.weight * (1.0 - nk.dot(&target));
            if want_grad {
                let g = &mut contrib_grads[p][k];
                g.weight += weights.lambda2 * inv_p * (1.0 - nk.dot(&target));
                g.normal -= target * (weights.lambda2 * inv_p * c.weight);
            }
        }
    }
    let depth = depth_sum * inv_p;
    let normal = normal_sum * inv_p;
    let breakdown = LossBreakdown {
        total: color + weights.lambda1 * depth + weights.lambda2 * normal,
        color,
        depth,
        normal,
        l1,
        dssim,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            detail: format!("non-finite loss {breakdown:?}"),
        });
    }
    let grads = want_grad.then(|| {
        let mut adjusted_grad = Image::new(gt.width, gt.height, gt.channels);
        for ((g, a), b) in adjusted_grad.data.iter_mut().zip(&adjusted.data).zip(&gt.data) {
            *g = if a > b {
                1.0 / n
            } else if a < b {
                -1.0 / n
            } else {
                0.0
            };
        }
        let mut rendered_grad = dssim_grad.expect("computed with gradient");
        rendered_grad.data.iter_mut().for_each(|v| *v *= weights.lambda3);
        LossGradients {
            adjusted: adjusted_grad,
            rendered: rendered_grad,
            contribs: contrib_grads,
        }
    });
    Ok((breakdown, grads))
}
