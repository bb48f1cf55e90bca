//! Backbone, partition quality screening and classifier heads.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub mod checkpoint;
pub mod conv;
pub mod ops;
pub mod quality;

pub use conv::{Backbone, BackboneProfile, Conv2d, Conv2dGrad, ConvSpec};
pub use ops::{fuse_global, partition, pool_global, screen, screen_and_embed, weighted_pool};
pub use quality::{QualityGrad, QualityPredictor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneProfile,
    /// `(height, width)` of input images.
    pub input_size: (usize, usize),
    pub k: usize,
    /// Bottleneck reduction of the quality predictor (`C -> C/r -> C`).
    pub reduction: usize,
    pub num_identities: usize,
    pub num_clothes: usize,
    /// Partition quality weighting on; off gives the plain backbone baseline.
    pub t2mgs: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("positive std");
        Self {
            weight: Array2::from_shape_fn((output, input), |_| normal.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn param_grad(&self, d_out: &Array2<f64>, x: &Array2<f64>) -> LinearGrad {
        LinearGrad {
            weight: d_out.t().dot(x),
            bias: d_out.sum_axis(Axis(0)),
        }
    }

    fn input_grad(&self, d_out: &Array2<f64>) -> Array2<f64> {
        d_out.dot(&self.weight)
    }

    fn zero_grad(&self) -> LinearGrad {
        LinearGrad {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

/// Everything a training forward pass produces, batched over `N` samples.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Backbone map `N x C x H x W`.
    pub features: Array4<f64>,
    /// Pooled original feature `f_g`, `N x C`.
    pub global: Array2<f64>,
    /// Quality scores `N x k x C` (absent without quality weighting).
    pub quality: Option<Array3<f64>>,
    /// Weighted part vectors `N x k x C`; plain part means without quality
    /// weighting.
    pub parts: Array3<f64>,
    /// Fused weighted global feature `f_g^w`, `N x C`.
    pub global_weighted: Option<Array2<f64>>,
    pub id_logits_g: Array2<f64>,
    pub id_logits_p: Option<Array2<f64>>,
    pub clothes_logits: Array2<f64>,
}

/// Per-sample view of the model's intermediate features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub features: Array3<f64>,
    pub parts: Vec<Array3<f64>>,
    pub quality: Vec<Array1<f64>>,
    pub weighted_parts: Vec<Array1<f64>>,
    pub global: Array1<f64>,
    pub global_weighted: Option<Array1<f64>>,
}

impl ForwardOutput {
    pub fn bundle(&self, n: usize) -> Result<FeatureBundle> {
        let features = self.features.index_axis(Axis(0), n).to_owned();
        let k = self.parts.dim().1;
        Ok(FeatureBundle {
            parts: ops::partition(&features, k)?,
            features,
            quality: self
                .quality
                .as_ref()
                .map(|q| (0..k).map(|i| q.slice(ndarray::s![n, i, ..]).to_owned()).collect())
                .unwrap_or_default(),
            weighted_parts: (0..k).map(|i| self.parts.slice(ndarray::s![n, i, ..]).to_owned()).collect(),
            global: self.global.row(n).to_owned(),
            global_weighted: self.global_weighted.as_ref().map(|g| g.row(n).to_owned()),
        })
    }
}

pub struct ForwardCache {
    backbone: conv::BackboneCache,
    quality: Vec<quality::QualityCache>,
    stats: Vec<quality::BatchStats>,
}

/// Upstream gradients for a backward pass. Absent entries contribute zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub global: Option<Array2<f64>>,
    pub parts: Option<Array3<f64>>,
    pub global_weighted: Option<Array2<f64>>,
    pub id_logits_g: Option<Array2<f64>>,
    pub id_logits_p: Option<Array2<f64>>,
    /// Gradient on clothes logits that trains only the clothes head; the
    /// feature it reads is treated as a constant.
    pub clothes_head: Option<Array2<f64>>,
    /// Gradient on clothes logits that flows only into `f_g`; the clothes
    /// head is treated as a constant.
    pub clothes_features: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub backbone: Vec<Conv2dGrad>,
    pub quality: Vec<QualityGrad>,
    pub id_head_g: LinearGrad,
    pub id_head_p: LinearGrad,
    pub clothes_head: LinearGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub quality: Vec<QualityPredictor>,
    pub id_head_g: Linear,
    pub id_head_p: Linear,
    pub clothes_head: Linear,
    /// `(C, H, W)` of the backbone output.
    pub feature_shape: (usize, usize, usize),
}

impl Model {
    /// Builds and initialises the model; rejects a partition count that does
    /// not divide the backbone's output height.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let feature_shape = config.backbone.output_shape(config.input_size)?;
        let (c, h, _) = feature_shape;
        if config.k == 0 || h % config.k != 0 {
            return Err(Error::Config(format!(
                "backbone output height {h} is not divisible by k={}",
                config.k
            )));
        }
        if config.num_identities == 0 || config.num_clothes == 0 {
            return Err(Error::Config("classifier heads need at least one class".into()));
        }
        let mut rng = rng::substream(seed, "model-init");
        let backbone = Backbone::new(&config.backbone, &mut rng);
        let quality = if config.t2mgs {
            (0..config.k)
                .map(|_| QualityPredictor::new(c, config.reduction, &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            id_head_g: Linear::new(c, config.num_identities, &mut rng),
            id_head_p: Linear::new(c, config.num_identities, &mut rng),
            clothes_head: Linear::new(c, config.num_clothes, &mut rng),
            backbone,
            quality,
            feature_shape,
            config,
        })
    }

    pub fn channels(&self) -> usize {
        self.feature_shape.0
    }

    /// Backbone only: images `N x 3 x H_img x W_img` to maps `N x C x H x W`.
    pub fn extract_features(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        self.check_images(images)?;
        self.backbone.infer(images)
    }

    fn check_images(&self, images: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if c != 3 || (h, w) != self.config.input_size {
            return Err(Error::Shape(format!(
                "expected images 3x{}x{}, got {c}x{h}x{w}",
                self.config.input_size.0, self.config.input_size.1
            )));
        }
        Ok(())
    }

    /// Heads and pooled features on top of a given backbone map. Pure: batch
    /// statistics are returned in the cache rather than applied.
    pub fn forward_from_features(&self, features: Array4<f64>, mode: Mode) -> Result<(ForwardOutput, Vec<quality::QualityCache>, Vec<quality::BatchStats>)> {
        let (n, c, h, _) = features.dim();
        if c != self.channels() || h % self.config.k != 0 {
            return Err(Error::Shape(format!(
                "feature map with {c} channels and height {h} does not fit the model"
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            let row = (pos / features.dim().3) % h;
            return Err(Error::Numeric(format!(
                "non-finite backbone activation in partition {}",
                row / (h / self.config.k)
            )));
        }
        let k = self.config.k;
        let rows = h / k;
        let samples: Vec<Array3<f64>> = features.outer_iter().map(|f| f.to_owned()).collect();
        let mut global = Array2::zeros((n, c));
        for (i, f) in samples.iter().enumerate() {
            global.row_mut(i).assign(&ops::pool_global(f));
        }

        let mut parts = Array3::zeros((n, k, c));
        let mut quality_out = None;
        let mut global_weighted = None;
        let mut caches = Vec::new();
        let mut stats = Vec::new();
        if self.config.t2mgs {
            let mut q_all = Array3::zeros((n, k, c));
            for (i, predictor) in self.quality.iter().enumerate() {
                let slab = conv::rows(&features, i * rows, (i + 1) * rows);
                let (phi, cache, st) = predictor.forward(&slab, mode)?;
                q_all.index_axis_mut(Axis(1), i).assign(&phi);
                caches.push(cache);
                stats.extend(st);
            }
            let mut gw = Array2::zeros((n, c));
            for (s, f) in samples.iter().enumerate() {
                let slabs = ops::partition(f, k)?;
                let weighted = slabs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| ops::weighted_pool(p, &q_all.slice(ndarray::s![s, i, ..]).to_owned()))
                    .collect::<Result<Vec<_>>>()?;
                for (i, wv) in weighted.iter().enumerate() {
                    parts.slice_mut(ndarray::s![s, i, ..]).assign(wv);
                }
                gw.row_mut(s).assign(&ops::fuse_global(&weighted)?);
            }
            quality_out = Some(q_all);
            global_weighted = Some(gw);
        } else {
            for (s, f) in samples.iter().enumerate() {
                for (i, p) in ops::partition(f, k)?.iter().enumerate() {
                    parts.slice_mut(ndarray::s![s, i, ..]).assign(&ops::pool_global(p));
                }
            }
        }

        let out = ForwardOutput {
            id_logits_g: self.id_head_g.forward(&global),
            id_logits_p: global_weighted.as_ref().map(|g| self.id_head_p.forward(g)),
            clothes_logits: self.clothes_head.forward(&global),
            features,
            global,
            quality: quality_out,
            parts,
            global_weighted,
        };
        Ok((out, caches, stats))
    }

    /// Full pass. Does not mutate the model; call
    /// [`Model::apply_batch_stats`] afterwards in training.
    pub fn forward(&self, images: &Array4<f64>, mode: Mode) -> Result<(ForwardOutput, ForwardCache)> {
        self.check_images(images)?;
        let (features, bcache) = self.backbone.forward(images)?;
        let (out, qcache, stats) = self.forward_from_features(features, mode)?;
        Ok((
            out,
            ForwardCache {
                backbone: bcache,
                quality: qcache,
                stats,
            },
        ))
    }

    /// Train-mode forward that also folds batch statistics into the running
    /// estimates.
    pub fn forward_train(&mut self, images: &Array4<f64>) -> Result<(ForwardOutput, ForwardCache)> {
        let (out, cache) = self.forward(images, Mode::Train)?;
        self.apply_batch_stats(&cache);
        Ok((out, cache))
    }

    pub fn apply_batch_stats(&mut self, cache: &ForwardCache) {
        for (q, st) in self.quality.iter_mut().zip(&cache.stats) {
            q.update_running_stats(st);
        }
    }

    /// Gradient of the feature-level outputs with respect to the backbone
    /// map, plus quality-predictor and head gradients.
    pub fn backward_to_features(
        &self,
        out: &ForwardOutput,
        quality_caches: &[quality::QualityCache],
        grads: &OutputGrads,
    ) -> Result<(Array4<f64>, Vec<QualityGrad>, [LinearGrad; 3])> {
        let (n, c, h, w) = out.features.dim();
        let k = self.config.k;
        let rows = h / k;

        let mut d_global = grads.global.clone().unwrap_or_else(|| Array2::zeros((n, c)));
        let mut id_g = self.id_head_g.zero_grad();
        let mut id_p = self.id_head_p.zero_grad();
        let mut clothes = self.clothes_head.zero_grad();
        if let Some(d) = &grads.id_logits_g {
            id_g = self.id_head_g.param_grad(d, &out.global);
            d_global += &self.id_head_g.input_grad(d);
        }
        if let Some(d) = &grads.clothes_head {
            clothes = self.clothes_head.param_grad(d, &out.global);
        }
        if let Some(d) = &grads.clothes_features {
            d_global += &self.clothes_head.input_grad(d);
        }

        let mut d_parts = grads.parts.clone().unwrap_or_else(|| Array3::zeros((n, k, c)));
        if self.config.t2mgs {
            let mut d_gw = grads.global_weighted.clone().unwrap_or_else(|| Array2::zeros((n, c)));
            if let (Some(d), Some(gw)) = (&grads.id_logits_p, &out.global_weighted) {
                id_p = self.id_head_p.param_grad(d, gw);
                d_gw += &self.id_head_p.input_grad(d);
            }
            for i in 0..k {
                let mut slab = d_parts.index_axis_mut(Axis(1), i);
                slab += &(&d_gw / k as f64);
            }
        }

        let area_part = (rows * w) as f64;
        let area = (h * w) as f64;
        let mut d_features = Array4::zeros((n, c, h, w));
        let mut quality_grads = Vec::with_capacity(self.quality.len());
        for i in 0..k {
            let slab = conv::rows(&out.features, i * rows, (i + 1) * rows);
            let mut d_slab = Array4::zeros(slab.raw_dim());
            let d_w = d_parts.index_axis(Axis(1), i);
            if self.config.t2mgs {
                let q = out.quality.as_ref().expect("quality present with t2mgs").index_axis(Axis(1), i).to_owned();
                let mut d_phi = Array2::zeros((n, c));
                for s in 0..n {
                    for ch in 0..c {
                        let g = d_w[[s, ch]] / area_part;
                        let plane = slab.slice(ndarray::s![s, ch, .., ..]);
                        d_phi[[s, ch]] = plane.iter().map(|v| v * g).sum();
                        d_slab.slice_mut(ndarray::s![s, ch, .., ..]).fill(q[[s, ch]] * g);
                    }
                }
                let (qg, d_in) = self.quality[i].backward(&d_phi, &quality_caches[i]);
                d_slab += &d_in;
                quality_grads.push(qg);
            } else {
                for s in 0..n {
                    for ch in 0..c {
                        d_slab.slice_mut(ndarray::s![s, ch, .., ..]).fill(d_w[[s, ch]] / area_part);
                    }
                }
            }
            d_features.slice_mut(ndarray::s![.., .., i * rows..(i + 1) * rows, ..]).assign(&d_slab);
        }
        for s in 0..n {
            for ch in 0..c {
                let g = d_global[[s, ch]] / area;
                d_features.slice_mut(ndarray::s![s, ch, .., ..]).mapv_inplace(|v| v + g);
            }
        }
        Ok((d_features, quality_grads, [id_g, id_p, clothes]))
    }

    pub fn backward(&self, out: &ForwardOutput, cache: &ForwardCache, grads: &OutputGrads) -> Result<ModelGrads> {
        let (d_features, quality, [id_head_g, id_head_p, clothes_head]) =
            self.backward_to_features(out, &cache.quality, grads)?;
        Ok(ModelGrads {
            backbone: self.backbone.backward(d_features, &cache.backbone),
            quality,
            id_head_g,
            id_head_p,
            clothes_head,
        })
    }

    /// Retrieval embedding: screened `f_g^w` with quality weighting, the
    /// pooled backbone feature without it. Eval-mode normalisation.
    pub fn embed(&self, images: &Array4<f64>, lambda: f64) -> Result<Array2<f64>> {
        ops::check_lambda(lambda)?;
        let (out, _) = self.forward(images, Mode::Eval)?;
        self.embed_from_output(&out, lambda)
    }

    pub fn embed_from_output(&self, out: &ForwardOutput, lambda: f64) -> Result<Array2<f64>> {
        let quality = match &out.quality {
            None => return Ok(out.global.clone()),
            Some(q) => q,
        };
        let (n, _, _, _) = out.features.dim();
        let c = self.channels();
        let k = self.config.k;
        let mut emb = Array2::zeros((n, c));
        for s in 0..n {
            let f = out.features.index_axis(Axis(0), s).to_owned();
            let parts = ops::partition(&f, k)?;
            let q: Vec<Array1<f64>> = (0..k).map(|i| quality.slice(ndarray::s![s, i, ..]).to_owned()).collect();
            emb.row_mut(s).assign(&ops::screen_and_embed(&parts, &q, lambda)?);
        }
        Ok(emb)
    }

    /// Trainable tensors with hierarchical names, in a fixed order.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), slice(&b.weight)));
            out.push((format!("backbone.{i}.bias"), slice1(&b.bias)));
        }
        for (i, q) in self.quality.iter().enumerate() {
            out.push((format!("quality.{i}.conv1.weight"), slice(&q.conv1_weight)));
            out.push((format!("quality.{i}.conv1.bias"), slice1(&q.conv1_bias)));
            out.push((format!("quality.{i}.conv2.weight"), slice(&q.conv2_weight)));
            out.push((format!("quality.{i}.conv2.bias"), slice1(&q.conv2_bias)));
            out.push((format!("quality.{i}.bn.weight"), slice1(&q.bn.gamma)));
            out.push((format!("quality.{i}.bn.bias"), slice1(&q.bn.beta)));
        }
        for (name, head) in [("id_head_g", &self.id_head_g), ("id_head_p", &self.id_head_p), ("clothes_head", &self.clothes_head)] {
            out.push((format!("{name}.weight"), slice(&head.weight)));
            out.push((format!("{name}.bias"), slice1(&head.bias)));
        }
        out
    }

    /// Mutable counterpart of [`Model::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, b) in self.backbone.blocks.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.weight"), slice_mut(&mut b.weight)));
            out.push((format!("backbone.{i}.bias"), slice1_mut(&mut b.bias)));
        }
        for (i, q) in self.quality.iter_mut().enumerate() {
            out.push((format!("quality.{i}.conv1.weight"), slice_mut(&mut q.conv1_weight)));
            out.push((format!("quality.{i}.conv1.bias"), slice1_mut(&mut q.conv1_bias)));
            out.push((format!("quality.{i}.conv2.weight"), slice_mut(&mut q.conv2_weight)));
            out.push((format!("quality.{i}.conv2.bias"), slice1_mut(&mut q.conv2_bias)));
            out.push((format!("quality.{i}.bn.weight"), slice1_mut(&mut q.bn.gamma)));
            out.push((format!("quality.{i}.bn.bias"), slice1_mut(&mut q.bn.beta)));
        }
        for (name, head) in [
            ("id_head_g", &mut self.id_head_g),
            ("id_head_p", &mut self.id_head_p),
            ("clothes_head", &mut self.clothes_head),
        ] {
            out.push((format!("{name}.weight"), slice_mut(&mut head.weight)));
            out.push((format!("{name}.bias"), slice1_mut(&mut head.bias)));
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, q) in self.quality.iter().enumerate() {
            out.push((format!("quality.{i}.bn.running_mean"), slice1(&q.bn.running_mean)));
            out.push((format!("quality.{i}.bn.running_var"), slice1(&q.bn.running_var)));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, q) in self.quality.iter_mut().enumerate() {
            out.push((format!("quality.{i}.bn.running_mean"), slice1_mut(&mut q.bn.running_mean)));
            out.push((format!("quality.{i}.bn.running_var"), slice1_mut(&mut q.bn.running_var)));
        }
        out
    }
}

impl ModelGrads {
    /// Same order as [`Model::params`].
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.backbone {
            out.push(slice(&b.weight));
            out.push(slice1(&b.bias));
        }
        for q in &self.quality {
            out.push(slice(&q.conv1_weight));
            out.push(slice1(&q.conv1_bias));
            out.push(slice(&q.conv2_weight));
            out.push(slice1(&q.conv2_bias));
            out.push(slice1(&q.gamma));
            out.push(slice1(&q.beta));
        }
        for head in [&self.id_head_g, &self.id_head_p, &self.clothes_head] {
            out.push(slice(&head.weight));
            out.push(slice1(&head.bias));
        }
        out
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

/// Stacks CHW images into an `N x 3 x H x W` batch.
pub fn batch_from_chw(images: &[Vec<f64>], (h, w): (usize, usize)) -> Result<Array4<f64>> {
    let mut flat = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.len() != 3 * h * w {
            return Err(Error::Shape(format!("image of {} values, expected 3x{h}x{w}", img.len())));
        }
        flat.extend_from_slice(img);
    }
    Array4::from_shape_vec((images.len(), 3, h, w), flat).map_err(|e| Error::Shape(e.to_string()))
}

#[cfg(test)]
mod tests;
