//! Training-time image augmentation: color jitter, horizontal flip and
//! random down-scaling with center padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SefiError};
use crate::imaging::Image;

/// Jitter factors are drawn from `[1 - JITTER, 1 + JITTER]`.
pub const JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub color_jitter: bool,
    pub hflip_p: f64,
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            color_jitter: true,
            hflip_p: 0.5,
            scale_range: [0.1, 1.0],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_p) {
            return Err(SefiError::config(format!(
                "hflip_p {} outside [0, 1]",
                self.hflip_p
            )));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(SefiError::config(format!(
                "scale_range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
            )));
        }
        Ok(())
    }
}

/// What a single [`augment`] call did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRecord {
    pub flipped: bool,
    pub scale: f64,
    /// Brightness, contrast and saturation factors (all 1 when jitter is off).
    pub jitter: [f64; 3],
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn color_jitter(image: &mut Image, [brightness, contrast, saturation]: [f64; 3]) {
    let n = (image.width() * image.height()) as f64;
    let data = image.data_mut();
    for v in data.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let mean = data
        .chunks_exact(3)
        .map(|p| luma([p[0], p[1], p[2]]))
        .sum::<f64>()
        / n;
    for v in data.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for p in data.chunks_exact_mut(3) {
        let gray = luma([p[0], p[1], p[2]]);
        for v in p {
            *v = ((*v - gray) * saturation + gray).clamp(0.0, 1.0);
        }
    }
}

/// Down-scales by `scale` and pastes the result at the center of a black
/// canvas of the original size.
fn scale_and_pad(image: &Image, scale: f64) -> Image {
    let side = image.width();
    let inner = ((scale * side as f64).round() as usize).clamp(1, side);
    if inner == side {
        return image.clone();
    }
    let small = image.resize(inner, inner);
    let offset = (side - inner) / 2;
    let mut out = Image::filled(side, side, [0.0; 3]);
    for y in 0..inner {
        for x in 0..inner {
            out.set_pixel(x + offset, y + offset, small.pixel(x, y));
        }
    }
    out
}

pub fn augment<R: Rng + ?Sized>(
    image: &Image,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(Image, AugmentRecord)> {
    if image.is_empty() {
        return Err(SefiError::input("cannot augment an empty image"));
    }
    if image.width() != image.height() {
        return Err(SefiError::input(format!(
            "augmentation expects a square image, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    let mut out = image.clone();
    let mut jitter = [1.0; 3];
    if config.color_jitter {
        for j in &mut jitter {
            *j = rng.random_range(1.0 - JITTER..=1.0 + JITTER);
        }
        color_jitter(&mut out, jitter);
    }
    let flipped = rng.random_bool(config.hflip_p);
    if flipped {
        out = out.flip_horizontal();
    }
    let [lo, hi] = config.scale_range;
    let scale = if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    };
    out = scale_and_pad(&out, scale);
    Ok((
        out,
        AugmentRecord {
            flipped,
            scale,
            jitter,
        },
    ))
}
