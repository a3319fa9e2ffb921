//! Image quality metrics: PSNR, SSIM and the D-SSIM loss.
//!
//! SSIM uses the usual 11×11 Gaussian window (σ = 1.5) with
//! `C1 = 0.01²`, `C2 = 0.03²` for a unit data range, evaluated at every
//! position where the window fits inside the image ("valid" windows) and
//! averaged over positions and channels. Images smaller than the window
//! shrink it to `min(width, height)` with the weights renormalized.

use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check(a: &Image, b: &Image) -> Result<()> {
    a.check_shape(b, "metric inputs")?;
    if a.data.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10·log10(1/MSE)` for `[0, 1]` images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian window actually used for an image of this size.
pub fn ssim_window(width: usize, height: usize) -> Vec<f64> {
    let size = SSIM_WINDOW.min(width).min(height).max(1);
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode correlation of one channel.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = g.iter().zip(&line[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `ow × oh` map back to `w × h`.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut cols = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for i in 0..k {
                cols[(y + i) * ow + x] += g[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = cols[y * ow + x];
            for i in 0..k {
                out[y * w + x + i] += g[i] * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

/// Mean SSIM and, if requested, its gradient w.r.t. `a`.
pub fn ssim_with_grad(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check(a, b)?;
    let (w, h, nc) = (a.width, a.height, a.channels);
    let g = ssim_window(w, h);
    let k = g.len();
    let n_out = ((w - k + 1) * (h - k + 1)) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, nc));
    for c in 0..nc {
        let x = channel(a, c);
        let y = channel(b, c);
        let sq = |v: &[f64], u: &[f64]| v.iter().zip(u).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_x = filter_valid(&x, w, h, &g);
        let mu_y = filter_valid(&y, w, h, &g);
        let e_xx = filter_valid(&sq(&x, &x), w, h, &g);
        let e_yy = filter_valid(&sq(&y, &y), w, h, &g);
        let e_xy = filter_valid(&sq(&x, &y), w, h, &g);
        let len = mu_x.len();
        let (mut d_mu, mut d_var, mut d_cov) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        let mut sum = 0.0;
        let scale = 1.0 / (n_out * nc as f64);
        for i in 0..len {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cxy = e_xy[i] - mx * my;
            let n1 = 2.0 * mx * my + C1;
            let n2 = 2.0 * cxy + C2;
            let d1 = mx * mx + my * my + C1;
            let d2 = vx + vy + C2;
            let s = n1 * n2 / (d1 * d2);
            sum += s;
            if want_grad {
                let ds_dmu = 2.0 * my * n2 / (d1 * d2) - s * 2.0 * mx / d1;
                let ds_dvar = -s / d2;
                let ds_dcov = 2.0 * n1 / (d1 * d2);
                d_mu[i] = scale * (ds_dmu - 2.0 * ds_dvar * mx - ds_dcov * my);
                d_var[i] = scale * ds_dvar;
                d_cov[i] = scale * ds_dcov;
            }
        }
        total += sum / n_out;
        if let Some(gimg) = grad.as_mut() {
            let t_mu = filter_valid_adjoint(&d_mu, w, h, &g);
            let t_var = filter_valid_adjoint(&d_var, w, h, &g);
            let t_cov = filter_valid_adjoint(&d_cov, w, h, &g);
            for p in 0..w * h {
                gimg.data[p * nc + c] = t_mu[p] + 2.0 * x[p] * t_var[p] + y[p] * t_cov[p];
            }
        }
    }
    Ok((total / nc as f64, grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_with_grad(a, b, false)?.0)
}

/// `(1 − SSIM) / 2`.
pub fn d_ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// D-SSIM and its gradient w.r.t. `a`.
pub fn d_ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_with_grad(a, b, true)?;
    let mut g = g.expect("gradient requested");
    g.data.iter_mut().for_each(|v| *v *= -0.5);
    Ok(((1.0 - s) / 2.0, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = Image::filled(4, 4, 3, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_uniform_offset() {
        let a = Image::filled(4, 4, 3, 0.3);
        let b = Image::filled(4, 4, 3, 0.4);
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random(20, 17, &mut rng);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(d_ssim(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ssim_constant_images() {
        let a = Image::filled(16, 16, 3, 0.0);
        let b = Image::filled(16, 16, 3, 1.0);
        assert_relative_eq!(ssim(&a, &b).unwrap(), C1 / (1.0 + C1), max_relative = 1e-9);
    }

    #[test]
    fn small_images_shrink_window() {
        assert_eq!(ssim_window(6, 9).len(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(6, 9, &mut rng);
        let b = random(6, 9, &mut rng);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = Image::new(4, 4, 3);
        let b = Image::new(4, 5, 3);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn d_ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(16, 16, &mut rng);
        let b = random(16, 16, &mut rng);
        let (_, g) = d_ssim_with_grad(&a, &b).unwrap();
        let eps = 1e-6;
        for idx in (0..a.data.len()).step_by(7) {
            let mut p = a.clone();
            p.data[idx] += eps;
            let mut m = a.clone();
            m.data[idx] -= eps;
            let fd = (d_ssim(&p, &b).unwrap() - d_ssim(&m, &b).unwrap()) / (2.0 * eps);
            assert!((g.data[idx] - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{idx}: {} vs {fd}", g.data[idx]);
        }
    }
}
