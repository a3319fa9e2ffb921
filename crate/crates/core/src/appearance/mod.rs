//! Per-image appearance model.
//!
//! The rendered image `I_r` is average-pooled by `2^D`, concatenated with a
//! learnable per-image embedding (broadcast over space), and passed through
//! a 3×3 convolution (`3 + E → C`) with SiLU, `D` stride-2 convolution blocks
//! with SiLU, and a final KAN convolution (`C → 3`). A sigmoid gives a
//! low-resolution transformation map that is bilinearly upsampled to the
//! full image size as `M`, and the adjusted image is
//! `I_a = clamp(I_r ⊙ 2M, 0, 1)`. With the final KAN layer at zero, `M = ½`
//! everywhere and `I_a = I_r` for any `I_r` in `[0, 1]`.

pub mod checkpoint;
pub mod conv;
pub mod kan;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use conv::{out_size, silu, silu_grad, Conv2d, FeatureMap};
use kan::KanConv2d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppearanceConfig {
    /// Embedding length `E`.
    pub embed_dim: usize,
    /// Hidden channels `C`.
    pub channels: usize,
    /// Number of stride-2 blocks `D`.
    pub depth: usize,
    /// KAN grid intervals `G`.
    pub grid: usize,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            channels: 32,
            depth: 5,
            grid: 5,
        }
    }
}

impl AppearanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.grid == 0 {
            return Err(Error::InvalidParameter(
                "appearance channels and grid must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn pool_factor(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel {
    pub config: AppearanceConfig,
    /// Image ids in embedding-row order.
    pub image_ids: Vec<u32>,
    /// `images × E`, row-major.
    pub embeddings: Vec<f64>,
    pub conv0: Conv2d,
    pub blocks: Vec<Conv2d>,
    pub kan: KanConv2d,
    index: BTreeMap<u32, usize>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AppearanceTrace {
    pub embed_index: usize,
    input: Image,
    pooled: FeatureMap,
    /// Pre-activations of `conv0` and each block.
    pre: Vec<FeatureMap>,
    /// Activations after SiLU (input of the next layer).
    act: Vec<FeatureMap>,
    low: FeatureMap,
    /// Full-resolution map `M`.
    pub map: Image,
    /// Adjusted image `I_a`.
    pub output: Image,
}

/// Gradients of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct AppearanceGradients {
    /// Laid out like [`AppearanceModel::network_params`].
    pub network: Vec<f64>,
    pub embed_index: usize,
    /// Gradient of the embedding row `embed_index`.
    pub embedding: Vec<f64>,
}

impl AppearanceModel {
    /// Every weight, bias and embedding zero.
    pub fn zeros(config: AppearanceConfig, image_ids: &[u32]) -> Result<Self> {
        config.validate()?;
        let (e, c) = (config.embed_dim, config.channels);
        let mut model = Self {
            config,
            image_ids: image_ids.to_vec(),
            embeddings: vec![0.0; image_ids.len() * e],
            conv0: Conv2d::zeros(3 + e, c, 1),
            blocks: (0..config.depth).map(|_| Conv2d::zeros(c, c, 2)).collect(),
            kan: KanConv2d::zeros(c, 3, config.grid),
            index: BTreeMap::new(),
        };
        model.rebuild_index()?;
        Ok(model)
    }

    /// Training initialization: random convolutions and embeddings, zero KAN
    /// head, so the model starts as the identity.
    pub fn new(config: AppearanceConfig, image_ids: &[u32], rng: &mut impl Rng) -> Result<Self> {
        let mut model = Self::zeros(config, image_ids)?;
        let (e, c) = (config.embed_dim, config.channels);
        model.conv0 = Conv2d::random(3 + e, c, 1, rng);
        model.blocks = (0..config.depth).map(|_| Conv2d::random(c, c, 2, rng)).collect();
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        model.embeddings.iter_mut().for_each(|v| *v = normal.sample(rng));
        Ok(model)
    }

    pub(crate) fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        for (i, &id) in self.image_ids.iter().enumerate() {
            if self.index.insert(id, i).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate image id {id}")));
            }
        }
        if self.embeddings.len() != self.image_ids.len() * self.config.embed_dim {
            return Err(Error::Shape("embedding table size mismatch".into()));
        }
        Ok(())
    }

    pub fn embedding_index(&self, image_id: u32) -> Result<usize> {
        self.index.get(&image_id).copied().ok_or(Error::MissingEmbedding(image_id))
    }

    pub fn embedding(&self, image_id: u32) -> Result<&[f64]> {
        let i = self.embedding_index(image_id)?;
        let e = self.config.embed_dim;
        Ok(&self.embeddings[i * e..(i + 1) * e])
    }

    pub fn network_param_count(&self) -> usize {
        self.conv0.param_count()
            + self.blocks.iter().map(Conv2d::param_count).sum::<usize>()
            + self.kan.param_count()
    }

    fn network_slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.conv0.weight, &self.conv0.bias];
        for b in &self.blocks {
            v.push(&b.weight);
            v.push(&b.bias);
        }
        v.push(&self.kan.coeffs);
        v.push(&self.kan.base);
        v
    }

    fn network_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![&mut self.conv0.weight, &mut self.conv0.bias];
        for b in &mut self.blocks {
            v.push(&mut b.weight);
            v.push(&mut b.bias);
        }
        v.push(&mut self.kan.coeffs);
        v.push(&mut self.kan.base);
        v
    }

    /// All network weights (not embeddings) as one flat vector.
    pub fn network_params(&self) -> Vec<f64> {
        self.network_slices().concat()
    }

    pub fn set_network_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.network_param_count() {
            return Err(Error::Shape(format!(
                "expected {} network parameters, got {}",
                self.network_param_count(),
                flat.len()
            )));
        }
        let mut rest = flat;
        for s in self.network_slices_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Mutable access to the network weights in flat order.
    pub fn for_each_network_param(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut k = 0;
        for s in self.network_slices_mut() {
            for v in s.iter_mut() {
                f(k, v);
                k += 1;
            }
        }
    }

    pub fn forward(&self, rendered: &Image, image_id: u32) -> Result<AppearanceTrace> {
        if rendered.channels != 3 || rendered.data.is_empty() {
            return Err(Error::Shape("appearance model expects a non-empty RGB image".into()));
        }
        let embed_index = self.embedding_index(image_id)?;
        let e = self.config.embed_dim;
        let emb = &self.embeddings[embed_index * e..(embed_index + 1) * e];
        let f = self.config.pool_factor();
        let (w, h) = (rendered.width, rendered.height);
        let (pw, ph) = (out_size(w, f), out_size(h, f));

        let mut pooled = FeatureMap::zeros(3 + e, ph, pw);
        for py in 0..ph {
            for px in 0..pw {
                let ys = py * f..((py + 1) * f).min(h);
                let xs = px * f..((px + 1) * f).min(w);
                let n = (ys.len() * xs.len()) as f64;
                for c in 0..3 {
                    let mut s = 0.0;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            s += rendered.get(x, y, c);
                        }
                    }
                    *pooled.at_mut(c, py, px) = s / n;
                }
                for (k, v) in emb.iter().enumerate() {
                    *pooled.at_mut(3 + k, py, px) = *v;
                }
            }
        }

        let mut pre = Vec::with_capacity(self.config.depth + 1);
        let mut act = Vec::with_capacity(self.config.depth + 1);
        let mut x = pooled.clone();
        for layer in std::iter::once(&self.conv0).chain(&self.blocks) {
            let z = layer.forward(&x)?;
            let mut a = z.clone();
            a.data.iter_mut().for_each(|v| *v = silu(*v));
            pre.push(z);
            act.push(a.clone());
            x = a;
        }
        let mut low = self.kan.forward(&x)?;
        low.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));

        let map = upsample_bilinear(&low, w, h);
        let mut output = Image::new(w, h, 3);
        for ((o, r), m) in output.data.iter_mut().zip(&rendered.data).zip(&map.data) {
            *o = (r * 2.0 * m).clamp(0.0, 1.0);
        }
        Ok(AppearanceTrace {
            embed_index,
            input: rendered.clone(),
            pooled,
            pre,
            act,
            low,
            map,
            output,
        })
    }

    /// Adjusted image `I_a` for a rendered image.
    pub fn apply(&self, rendered: &Image, image_id: u32) -> Result<Image> {
        Ok(self.forward(rendered, image_id)?.output)
    }

    /// Pulls `dL/dI_a` back to `dL/dI_r` (through both the product and the
    /// network input) and to the model parameters.
    pub fn backward(&self, trace: &AppearanceTrace, grad_output: &Image) -> Result<(Image, AppearanceGradients)> {
        grad_output.check_shape(&trace.output, "appearance gradient")?;
        let (w, h) = (trace.input.width, trace.input.height);
        let mut grad_in = Image::new(w, h, 3);
        let mut grad_map = Image::new(w, h, 3);
        for i in 0..grad_in.data.len() {
            let r = trace.input.data[i];
            let m = trace.map.data[i];
            let v = r * 2.0 * m;
            if (0.0..=1.0).contains(&v) {
                let g = grad_output.data[i];
                grad_in.data[i] = g * 2.0 * m;
                grad_map.data[i] = g * 2.0 * r;
            }
        }
        let mut g = upsample_bilinear_adjoint(&grad_map, trace.low.width, trace.low.height);
        for (gv, l) in g.data.iter_mut().zip(&trace.low.data) {
            *gv *= l * (1.0 - l);
        }

        let mut network = vec![0.0; self.network_param_count()];
        // parameter offsets in flat order
        let mut offsets = Vec::with_capacity(self.blocks.len() + 2);
        let mut off = 0;
        for layer in std::iter::once(&self.conv0).chain(&self.blocks) {
            offsets.push(off);
            off += layer.param_count();
        }
        let kan_off = off;

        let last = trace.act.last().expect("at least conv0");
        g = self.kan.backward(last, &g, &mut network[kan_off..]);
        let layers: Vec<&Conv2d> = std::iter::once(&self.conv0).chain(&self.blocks).collect();
        for k in (0..layers.len()).rev() {
            for (gv, z) in g.data.iter_mut().zip(&trace.pre[k].data) {
                *gv *= silu_grad(*z);
            }
            let input = if k == 0 { &trace.pooled } else { &trace.act[k - 1] };
            let n = layers[k].param_count();
            g = layers[k].backward(input, &g, &mut network[offsets[k]..offsets[k] + n]);
        }

        // g is now dL/dpooled: split into image and embedding channels
        let f = self.config.pool_factor();
        let e = self.config.embed_dim;
        let mut embedding = vec![0.0; e];
        for py in 0..g.height {
            for px in 0..g.width {
                let ys = py * f..((py + 1) * f).min(h);
                let xs = px * f..((px + 1) * f).min(w);
                let n = (ys.len() * xs.len()) as f64;
                for c in 0..3 {
                    let share = g.at(c, py, px) / n;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            grad_in.data[(y * w + x) * 3 + c] += share;
                        }
                    }
                }
                for (k, ge) in embedding.iter_mut().enumerate() {
                    *ge += g.at(3 + k, py, px);
                }
            }
        }
        if network.iter().chain(&embedding).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient("appearance"));
        }
        Ok((
            grad_in,
            AppearanceGradients {
                network,
                embed_index: trace.embed_index,
                embedding,
            },
        ))
    }
}

/// Source coordinate and weights for half-pixel-centered bilinear resampling.
#[inline]
fn bilinear_taps(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear upsampling (half-pixel centers, edge clamped) of a 3-channel map
/// to an interleaved `w × h` image.
pub fn upsample_bilinear(low: &FeatureMap, w: usize, h: usize) -> Image {
    let mut out = Image::new(w, h, low.channels);
    for y in 0..h {
        let (y0, y1, fy) = bilinear_taps(y, h, low.height);
        for x in 0..w {
            let (x0, x1, fx) = bilinear_taps(x, w, low.width);
            for c in 0..low.channels {
                let top = low.at(c, y0, x0) * (1.0 - fx) + low.at(c, y0, x1) * fx;
                let bot = low.at(c, y1, x0) * (1.0 - fx) + low.at(c, y1, x1) * fx;
                out.set(x, y, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn upsample_bilinear_adjoint(grad: &Image, lw: usize, lh: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(grad.channels, lh, lw);
    for y in 0..grad.height {
        let (y0, y1, fy) = bilinear_taps(y, grad.height, lh);
        for x in 0..grad.width {
            let (x0, x1, fx) = bilinear_taps(x, grad.width, lw);
            for c in 0..grad.channels {
                let g = grad.get(x, y, c);
                *out.at_mut(c, y0, x0) += g * (1.0 - fx) * (1.0 - fy);
                *out.at_mut(c, y0, x1) += g * fx * (1.0 - fy);
                *out.at_mut(c, y1, x0) += g * (1.0 - fx) * fy;
                *out.at_mut(c, y1, x1) += g * fx * fy;
            }
        }
    }
    out
}
