//! Strided 2-D convolution via im2col, and the convolutional backbones.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn output_size(&self, (h, w): (usize, usize)) -> Option<(usize, usize)> {
        let span_h = (h + 2 * self.padding.0).checked_sub(self.kernel.0)?;
        let span_w = (w + 2 * self.padding.1).checked_sub(self.kernel.1)?;
        Some((span_h / self.stride.0 + 1, span_w / self.stride.1 + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub spec: ConvSpec,
    /// `out x (in * kh * kw)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let weight = Array2::from_shape_fn((spec.out_channels, fan_in), |_| normal.sample(rng));
        Self {
            spec,
            weight,
            bias: Array1::zeros(spec.out_channels),
        }
    }

    fn im2col(&self, x: ArrayView3<f64>, out_hw: (usize, usize)) -> Array2<f64> {
        let ConvSpec {
            in_channels,
            kernel: (kh, kw),
            stride: (sh, sw),
            padding: (ph, pw),
            ..
        } = self.spec;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (oh, ow) = out_hw;
        let mut cols = Array2::zeros((in_channels * kh * kw, oh * ow));
        for c in 0..in_channels {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = x[[c, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: ArrayView2<f64>, in_hw: (usize, usize), out_hw: (usize, usize)) -> Array3<f64> {
        let ConvSpec {
            in_channels,
            kernel: (kh, kw),
            stride: (sh, sw),
            padding: (ph, pw),
            ..
        } = self.spec;
        let (h, w) = in_hw;
        let (oh, ow) = out_hw;
        let mut x = Array3::zeros((in_channels, h, w));
        for c in 0..in_channels {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = cols.row((c * kh + ky) * kw + kx);
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                x[[c, iy as usize, ix as usize]] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output and the per-sample column buffers for backward.
    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Vec<Array2<f64>>)> {
        let (n, c, h, w) = x.dim();
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let (oh, ow) = self
            .spec
            .output_size((h, w))
            .ok_or_else(|| Error::Shape(format!("input {h}x{w} smaller than kernel")))?;
        let per_sample: Vec<(Array2<f64>, Array2<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cols = self.im2col(x.index_axis(Axis(0), i), (oh, ow));
                let mut out = self.weight.dot(&cols);
                out += &self.bias.view().insert_axis(Axis(1));
                (out, cols)
            })
            .collect();
        let mut y = Array4::zeros((n, self.spec.out_channels, oh, ow));
        let mut caches = Vec::with_capacity(n);
        for (i, (out, cols)) in per_sample.into_iter().enumerate() {
            y.index_axis_mut(Axis(0), i)
                .assign(&out.into_shape_with_order((self.spec.out_channels, oh, ow)).expect("contiguous"));
            caches.push(cols);
        }
        Ok((y, caches))
    }

    /// Gradients w.r.t. parameters and input, given the upstream gradient.
    pub fn backward(
        &self,
        dy: &Array4<f64>,
        cols: &[Array2<f64>],
        in_hw: (usize, usize),
    ) -> (Conv2dGrad, Array4<f64>) {
        let (n, co, oh, ow) = dy.dim();
        let per_sample: Vec<(Array2<f64>, Array1<f64>, Array3<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let d = dy
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape_with_order((co, oh * ow))
                    .expect("contiguous");
                let dw = d.dot(&cols[i].t());
                let db = d.sum_axis(Axis(1));
                let dcols = self.weight.t().dot(&d);
                let dx = self.col2im(dcols.view(), in_hw, (oh, ow));
                (dw, db, dx)
            })
            .collect();
        let mut grad = Conv2dGrad {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(co),
        };
        let mut dx = Array4::zeros((n, self.spec.in_channels, in_hw.0, in_hw.1));
        for (i, (dw, db, dxi)) in per_sample.into_iter().enumerate() {
            grad.weight += &dw;
            grad.bias += &db;
            dx.index_axis_mut(Axis(0), i).assign(&dxi);
        }
        (grad, dx)
    }
}

/// Named backbone layouts. Every block is conv followed by ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneProfile {
    /// 64x32 input to a 64x12x4 map.
    #[default]
    Toy,
    /// 64x32 input to a 64x24x4 map.
    ToyTall,
    Custom { blocks: Vec<ConvSpec> },
}

impl BackboneProfile {
    pub fn blocks(&self) -> Vec<ConvSpec> {
        let conv = |i, o, kernel, stride, padding| ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel,
            stride,
            padding,
        };
        match self {
            BackboneProfile::Toy => vec![
                conv(3, 16, (3, 3), (2, 2), (1, 1)),
                conv(16, 32, (3, 3), (2, 2), (1, 1)),
                conv(32, 64, (3, 3), (1, 2), (1, 1)),
                conv(64, 64, (5, 3), (1, 1), (0, 1)),
            ],
            BackboneProfile::ToyTall => vec![
                conv(3, 16, (3, 3), (2, 2), (1, 1)),
                conv(16, 32, (3, 3), (1, 2), (1, 1)),
                conv(32, 64, (3, 3), (1, 2), (1, 1)),
                conv(64, 64, (9, 3), (1, 1), (0, 1)),
            ],
            BackboneProfile::Custom { blocks } => blocks.clone(),
        }
    }

    /// `(C, H, W)` of the feature map for a `(height, width)` input.
    pub fn output_shape(&self, input: (usize, usize)) -> Result<(usize, usize, usize)> {
        let blocks = self.blocks();
        if blocks.is_empty() {
            return Err(Error::Config("backbone has no blocks".into()));
        }
        let mut hw = input;
        let mut channels = 3;
        for (i, b) in blocks.iter().enumerate() {
            if b.in_channels != channels {
                return Err(Error::Config(format!(
                    "backbone block {i} expects {} channels but receives {channels}",
                    b.in_channels
                )));
            }
            if b.stride.0 == 0 || b.stride.1 == 0 {
                return Err(Error::Config(format!("backbone block {i} has zero stride")));
            }
            hw = b.output_size(hw).ok_or_else(|| {
                Error::Config(format!("backbone block {i} kernel exceeds its {}x{} input", hw.0, hw.1))
            })?;
            channels = b.out_channels;
        }
        Ok((channels, hw.0, hw.1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub blocks: Vec<Conv2d>,
}

pub struct BackboneCache {
    inputs_hw: Vec<(usize, usize)>,
    cols: Vec<Vec<Array2<f64>>>,
    /// Post-ReLU activations; positive entries mark where gradient flows.
    activations: Vec<Array4<f64>>,
}

impl Backbone {
    pub fn new<R: Rng>(profile: &BackboneProfile, rng: &mut R) -> Self {
        Self {
            blocks: profile.blocks().into_iter().map(|s| Conv2d::new(s, rng)).collect(),
        }
    }

    pub fn forward(&self, images: &Array4<f64>) -> Result<(Array4<f64>, BackboneCache)> {
        let mut cache = BackboneCache {
            inputs_hw: Vec::new(),
            cols: Vec::new(),
            activations: Vec::new(),
        };
        let mut x = images.clone();
        for block in &self.blocks {
            cache.inputs_hw.push((x.dim().2, x.dim().3));
            let (mut y, cols) = block.forward(&x)?;
            y.mapv_inplace(|v| v.max(0.0));
            cache.cols.push(cols);
            cache.activations.push(y.clone());
            x = y;
        }
        Ok((x, cache))
    }

    pub fn infer(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward(images)?.0)
    }

    pub fn backward(&self, d_out: Array4<f64>, cache: &BackboneCache) -> Vec<Conv2dGrad> {
        let mut grads = Vec::with_capacity(self.blocks.len());
        let mut d = d_out;
        for (i, block) in self.blocks.iter().enumerate().rev() {
            ndarray::Zip::from(&mut d)
                .and(&cache.activations[i])
                .for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            let (g, dx) = block.backward(&d, &cache.cols[i], cache.inputs_hw[i]);
            grads.push(g);
            d = dx;
        }
        grads.reverse();
        grads
    }
}

/// Slices `x` rows `[start, end)` along the height axis (axis 2).
pub(crate) fn rows(x: &Array4<f64>, start: usize, end: usize) -> Array4<f64> {
    x.slice(s![.., .., start..end, ..]).to_owned()
}
