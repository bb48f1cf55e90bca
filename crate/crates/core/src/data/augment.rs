use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

const ERASE_ATTEMPTS: usize = 10;
const ERASE_MIN_ASPECT: f64 = 0.3;

/// Random flip / pad-and-crop / erase settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_padding: usize,
    pub erase_prob: f64,
    pub erase_area_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_padding: 10,
            erase_prob: 0.5,
            erase_area_range: (0.02, 0.4),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            crop_padding: 0,
            erase_prob: 0.0,
            erase_area_range: (0.02, 0.4),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.flip_prob) || !prob(self.erase_prob) {
            return Err(Error::Config("augmentation probabilities must lie in [0,1]".into()));
        }
        let (lo, hi) = self.erase_area_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "erase_area_range ({lo}, {hi}) must be ordered inside (0,1)"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Decisions taken by one `augment_traced` call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AugmentTrace {
    pub flipped: bool,
    /// Top-left corner of the crop window inside the padded image.
    pub crop_offset: Option<(usize, usize)>,
    pub erased: Option<EraseRect>,
}

pub fn augment<R: Rng>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    augment_traced(image, cfg, rng).0
}

/// Flip, then zero-pad by `crop_padding` and crop back to size, then
/// random-erase with uniform noise. Each stage always consumes its decision
/// draw, so the stream position does not depend on earlier outcomes.
pub fn augment_traced<R: Rng>(
    image: &Image,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Image, AugmentTrace) {
    let mut trace = AugmentTrace::default();
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();

    if rng.random::<f64>() < cfg.flip_prob {
        trace.flipped = true;
        for y in 0..h {
            for x in 0..w / 2 {
                let a = out.pixel(y, x);
                let b = out.pixel(y, w - 1 - x);
                out.set_pixel(y, x, b);
                out.set_pixel(y, w - 1 - x, a);
            }
        }
    }

    if cfg.crop_padding > 0 {
        let pad = cfg.crop_padding;
        let oy = rng.random_range(0..=2 * pad);
        let ox = rng.random_range(0..=2 * pad);
        trace.crop_offset = Some((oy, ox));
        let src = out.clone();
        for y in 0..h {
            for x in 0..w {
                // position in the padded frame minus the padding
                let sy = (y + oy).checked_sub(pad).filter(|&v| v < h);
                let sx = (x + ox).checked_sub(pad).filter(|&v| v < w);
                let px = match (sy, sx) {
                    (Some(sy), Some(sx)) => src.pixel(sy, sx),
                    _ => [0.0; 3],
                };
                out.set_pixel(y, x, px);
            }
        }
    }

    if rng.random::<f64>() < cfg.erase_prob {
        if let Some(rect) = sample_erase_rect(h, w, cfg.erase_area_range, rng) {
            for y in rect.top..rect.top + rect.height {
                for x in rect.left..rect.left + rect.width {
                    let noise = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
                    out.set_pixel(y, x, noise);
                }
            }
            trace.erased = Some(rect);
        }
    }

    (out, trace)
}

fn sample_erase_rect<R: Rng>(
    h: usize,
    w: usize,
    (lo, hi): (f64, f64),
    rng: &mut R,
) -> Option<EraseRect> {
    let total = (h * w) as f64;
    let log_ratio = (ERASE_MIN_ASPECT.ln(), (1.0 / ERASE_MIN_ASPECT).ln());
    for _ in 0..ERASE_ATTEMPTS {
        let area = rng.random_range(lo..=hi) * total;
        let aspect = rng.random_range(log_ratio.0..=log_ratio.1).exp();
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        let frac = (eh * ew) as f64 / total;
        if eh == 0 || ew == 0 || eh >= h || ew >= w || frac < lo || frac > hi {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        return Some(EraseRect {
            top,
            left,
            height: eh,
            width: ew,
        });
    }
    None
}
