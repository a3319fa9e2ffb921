//! Plain 3×3 convolutions on channel-major feature maps.

use rand::Rng;

use crate::error::{Error, Result};

/// `channels × height × width`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Value with zero padding outside the map.
    #[inline]
    pub fn padded(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            0.0
        } else {
            self.at(c, y as usize, x as usize)
        }
    }
}

pub(crate) fn out_size(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `[out][in][3][3]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    /// Uniform fan-in initialization.
    pub fn random(in_channels: usize, out_channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let mut c = Self::zeros(in_channels, out_channels, stride);
        let bound = (1.0 / (in_channels * 9) as f64).sqrt();
        c.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        c
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let (oh, ow) = (out_size(input.height, self.stride), out_size(input.width, self.stride));
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for o in 0..self.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_channels {
                        for ky in 0..3 {
                            let iy = (y * self.stride + ky) as isize - 1;
                            for kx in 0..3 {
                                let ix = (x * self.stride + kx) as isize - 1;
                                acc += self.w(o, i, ky, kx) * input.padded(i, iy, ix);
                            }
                        }
                    }
                    *out.at_mut(o, y, x) = acc;
                }
            }
        }
        Ok(out)
    }

    /// Returns the input gradient and accumulates parameter gradients into
    /// `grad` (`weight` then `bias`, same layout as the layer).
    pub fn backward(&self, input: &FeatureMap, grad_out: &FeatureMap, grad: &mut [f64]) -> FeatureMap {
        let mut grad_in = FeatureMap::zeros(input.channels, input.height, input.width);
        let nw = self.weight.len();
        for o in 0..self.out_channels {
            for y in 0..grad_out.height {
                for x in 0..grad_out.width {
                    let g = grad_out.at(o, y, x);
                    if g == 0.0 {
                        continue;
                    }
                    grad[nw + o] += g;
                    for i in 0..self.in_channels {
                        for ky in 0..3 {
                            let iy = (y * self.stride + ky) as isize - 1;
                            if iy < 0 || iy >= input.height as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (x * self.stride + kx) as isize - 1;
                                if ix < 0 || ix >= input.width as isize {
                                    continue;
                                }
                                let widx = ((o * self.in_channels + i) * 3 + ky) * 3 + kx;
                                grad[widx] += g * input.at(i, iy as usize, ix as usize);
                                *grad_in.at_mut(i, iy as usize, ix as usize) += g * self.weight[widx];
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}
