//! Per-partition quality predictor: 1x1 conv, 1x1 conv, batch norm, sigmoid,
//! spatial average. Output is one score in (0, 1) per channel.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityPredictor {
    /// `C/r x C`
    pub conv1_weight: Array2<f64>,
    pub conv1_bias: Array1<f64>,
    /// `C x C/r`
    pub conv2_weight: Array2<f64>,
    pub conv2_bias: Array1<f64>,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityGrad {
    pub conv1_weight: Array2<f64>,
    pub conv1_bias: Array1<f64>,
    pub conv2_weight: Array2<f64>,
    pub conv2_bias: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Batch statistics observed in train mode (biased mean/var, plus count).
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub count: usize,
}

pub struct QualityCache {
    dims: (usize, usize, usize, usize),
    x: Array2<f64>,
    u: Array2<f64>,
    v_hat: Array2<f64>,
    inv_std: Array1<f64>,
    s: Array2<f64>,
    mode: Mode,
}

fn to_columns(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    x.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, n * h * w))
        .expect("standard layout")
}

fn from_columns(cols: Array2<f64>, (n, c, h, w): (usize, usize, usize, usize)) -> Array4<f64> {
    cols.into_shape_with_order((c, n, h, w))
        .expect("column count matches")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl QualityPredictor {
    pub fn new<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "reduction {reduction} must divide the channel count {channels}"
            )));
        }
        let mid = channels / reduction;
        let n1 = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, (2.0 / mid as f64).sqrt()).expect("positive std");
        Ok(Self {
            conv1_weight: Array2::from_shape_fn((mid, channels), |_| n1.sample(rng)),
            conv1_bias: Array1::zeros(mid),
            conv2_weight: Array2::from_shape_fn((channels, mid), |_| n2.sample(rng)),
            conv2_bias: Array1::zeros(channels),
            bn: BatchNorm::new(channels),
        })
    }

    pub fn channels(&self) -> usize {
        self.conv2_weight.nrows()
    }

    /// Scores for a batch of part maps `N x C x h x W`, returned as `N x C`.
    /// Train mode normalises with batch statistics and reports them so the
    /// caller can fold them into the running estimates.
    pub fn forward(&self, part: &Array4<f64>, mode: Mode) -> Result<(Array2<f64>, QualityCache, Option<BatchStats>)> {
        let dims = part.dim();
        let (n, c, h, w) = dims;
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "quality predictor built for {} channels, got {c}",
                self.channels()
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let x = to_columns(part);
        let mut u = self.conv1_weight.dot(&x);
        u += &self.conv1_bias.view().insert_axis(Axis(1));
        let mut v = self.conv2_weight.dot(&u);
        v += &self.conv2_bias.view().insert_axis(Axis(1));

        let (mean, inv_std, stats) = match mode {
            Mode::Train => {
                let mean = v.mean_axis(Axis(1)).expect("non-empty");
                let mut var = Array1::zeros(c);
                for ch in 0..c {
                    let mu = mean[ch];
                    var[ch] = v.row(ch).iter().map(|&t| (t - mu) * (t - mu)).sum::<f64>() / m as f64;
                }
                let inv_std = var.mapv(|s: f64| 1.0 / (s + BN_EPS).sqrt());
                (mean.clone(), inv_std, Some(BatchStats { mean, var, count: m }))
            }
            Mode::Eval => (
                self.bn.running_mean.clone(),
                self.bn.running_var.mapv(|s| 1.0 / (s + BN_EPS).sqrt()),
                None,
            ),
        };

        let mut v_hat = v;
        let mut s = Array2::zeros((c, m));
        for ch in 0..c {
            let (mu, is, g, b) = (mean[ch], inv_std[ch], self.bn.gamma[ch], self.bn.beta[ch]);
            let mut row = v_hat.row_mut(ch);
            let mut srow = s.row_mut(ch);
            for j in 0..m {
                let vh = (row[j] - mu) * is;
                row[j] = vh;
                srow[j] = sigmoid(g * vh + b);
            }
        }

        let mut phi = Array2::zeros((n, c));
        for ch in 0..c {
            let srow = s.row(ch);
            for i in 0..n {
                let sum: f64 = srow.slice(ndarray::s![i * hw..(i + 1) * hw]).iter().sum();
                phi[[i, ch]] = sum / hw as f64;
            }
        }
        let cache = QualityCache {
            dims,
            x,
            u,
            v_hat,
            inv_std,
            s,
            mode,
        };
        Ok((phi, cache, stats))
    }

    /// Exponential running-average update; variance uses the unbiased
    /// estimate.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        self.bn.running_mean = &self.bn.running_mean * (1.0 - BN_MOMENTUM) + &stats.mean * BN_MOMENTUM;
        self.bn.running_var =
            &self.bn.running_var * (1.0 - BN_MOMENTUM) + &(&stats.var * unbias) * BN_MOMENTUM;
    }

    /// Backpropagates `d phi` (`N x C`) to parameters and to the part map.
    pub fn backward(&self, d_phi: &Array2<f64>, cache: &QualityCache) -> (QualityGrad, Array4<f64>) {
        let (n, c, h, w) = cache.dims;
        let hw = h * w;
        let m = n * hw;

        let mut d_y = Array2::zeros((c, m));
        for ch in 0..c {
            for i in 0..n {
                let g = d_phi[[i, ch]] / hw as f64;
                for j in i * hw..(i + 1) * hw {
                    let sv = cache.s[[ch, j]];
                    d_y[[ch, j]] = g * sv * (1.0 - sv);
                }
            }
        }
        let d_gamma = (&d_y * &cache.v_hat).sum_axis(Axis(1));
        let d_beta = d_y.sum_axis(Axis(1));

        let mut d_v = Array2::zeros((c, m));
        for ch in 0..c {
            let g = self.bn.gamma[ch];
            let is = cache.inv_std[ch];
            let d_vhat = d_y.row(ch).mapv(|t| t * g);
            match cache.mode {
                Mode::Train => {
                    let sum_d = d_vhat.sum();
                    let sum_dx = d_vhat.iter().zip(cache.v_hat.row(ch)).map(|(a, b)| a * b).sum::<f64>();
                    let mf = m as f64;
                    for j in 0..m {
                        d_v[[ch, j]] = is / mf * (mf * d_vhat[j] - sum_d - cache.v_hat[[ch, j]] * sum_dx);
                    }
                }
                Mode::Eval => d_v.row_mut(ch).assign(&(d_vhat * is)),
            }
        }

        let d_w2 = d_v.dot(&cache.u.t());
        let d_b2 = d_v.sum_axis(Axis(1));
        let d_u = self.conv2_weight.t().dot(&d_v);
        let d_w1 = d_u.dot(&cache.x.t());
        let d_b1 = d_u.sum_axis(Axis(1));
        let d_x = self.conv1_weight.t().dot(&d_u);

        (
            QualityGrad {
                conv1_weight: d_w1,
                conv1_bias: d_b1,
                conv2_weight: d_w2,
                conv2_bias: d_b2,
                gamma: d_gamma,
                beta: d_beta,
            },
            from_columns(d_x, cache.dims),
        )
    }

    /// Single part map convenience wrapper, `C x h x W -> C`. Does not touch
    /// the running statistics.
    pub fn predict(&self, part: &Array3<f64>, mode: Mode) -> Result<Array1<f64>> {
        let batch = part.view().insert_axis(Axis(0)).to_owned();
        let (phi, _, _) = self.forward(&batch, mode)?;
        Ok(phi.index_axis(Axis(0), 0).to_owned())
    }
}
