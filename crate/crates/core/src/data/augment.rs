use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_prob: f64,
    /// Zero padding added on every side before the random crop.
    pub crop_pad: usize,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, `[min, max]`.
    pub erase_area: (f64, f64),
    /// Erased region aspect ratio (height / width), sampled log-uniformly.
    pub erase_aspect: (f64, f64),
    /// Constant written into erased pixels; `None` fills with uniform noise.
    pub erase_value: Option<f64>,
}

/// Mean of the CLIP per-channel pixel means, the toy erase value.
pub const ERASE_MEAN: f64 = 0.449;

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl AugmentConfig {
    pub fn toy() -> Self {
        Self {
            flip_prob: 0.5,
            crop_prob: 1.0,
            crop_pad: 2,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
            erase_value: Some(ERASE_MEAN),
        }
    }

    pub fn production() -> Self {
        Self {
            crop_pad: 10,
            erase_area: (0.02, 0.4),
            ..Self::toy()
        }
    }

    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            crop_prob: 0.0,
            erase_prob: 0.0,
            ..Self::toy()
        }
    }
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(y, x, c, img.get(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

/// Crop of the zero-padded image at offset `(dy, dx)` into the padded frame.
pub fn pad_crop(img: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let mut out = Image::zeros(img.height, img.width, img.channels);
    for y in 0..img.height {
        let sy = (y + dy).checked_sub(pad).filter(|&s| s < img.height);
        for x in 0..img.width {
            let sx = (x + dx).checked_sub(pad).filter(|&s| s < img.width);
            if let (Some(sy), Some(sx)) = (sy, sx) {
                for c in 0..img.channels {
                    out.set(y, x, c, img.get(sy, sx, c));
                }
            }
        }
    }
    out
}

fn random_erase(img: &mut Image, rng: &mut impl Rng, cfg: &AugmentConfig) {
    let area = (img.height * img.width) as f64;
    for _ in 0..10 {
        let target = rng.random_range(cfg.erase_area.0..=cfg.erase_area.1) * area;
        let log_aspect = rng.random_range(cfg.erase_aspect.0.ln()..=cfg.erase_aspect.1.ln());
        let aspect = log_aspect.exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h >= img.height || w >= img.width {
            continue;
        }
        let y0 = rng.random_range(0..=img.height - h);
        let x0 = rng.random_range(0..=img.width - w);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for c in 0..img.channels {
                    let v = cfg.erase_value.unwrap_or_else(|| rng.random::<f64>());
                    img.set(y, x, c, v);
                }
            }
        }
        return;
    }
}

/// Horizontal flip, pad-and-crop, then random erasing, each with its own probability.
pub fn augment_image(img: &Image, rng: &mut impl Rng, cfg: &AugmentConfig) -> Image {
    let mut out = if rng.random_bool(cfg.flip_prob) {
        hflip(img)
    } else {
        img.clone()
    };
    if cfg.crop_pad > 0 && rng.random_bool(cfg.crop_prob) {
        let dy = rng.random_range(0..=2 * cfg.crop_pad);
        let dx = rng.random_range(0..=2 * cfg.crop_pad);
        out = pad_crop(&out, cfg.crop_pad, dy, dx);
    }
    if rng.random_bool(cfg.erase_prob) {
        random_erase(&mut out, rng, cfg);
    }
    out
}
