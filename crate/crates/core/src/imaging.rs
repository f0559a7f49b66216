//! RGB images in `[0, 1]`, PNG/JPEG I/O and bilinear resampling.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Result, SefiError};
use crate::tensor::Matrix;

/// Row-major, channel-interleaved RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(SefiError::shape(format!(
                "{} values do not form a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel_mean(&self, channel: usize) -> f64 {
        let n = self.width * self.height;
        if n == 0 {
            return 0.0;
        }
        self.data.iter().skip(channel).step_by(3).sum::<f64>() / n as f64
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect();
        Self::new(w as usize, h as usize, data)
    }

    /// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(x, y).map(to_u8);
                out.put_pixel(x as u32, y as u32, Rgb(p));
            }
        }
        out.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centers (no corner alignment).
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let wx = bilinear_taps(self.width, width);
        let wy = bilinear_taps(self.height, height);
        let mut out = Image::filled(width, height, [0.0; 3]);
        for (y, ty) in wy.iter().enumerate() {
            for (x, tx) in wx.iter().enumerate() {
                let mut acc = [0.0; 3];
                for &(sy, fy) in ty {
                    for &(sx, fx) in tx {
                        let p = self.pixel(sx, sy);
                        for c in 0..3 {
                            acc[c] += fy * fx * p[c];
                        }
                    }
                }
                out.set_pixel(x, y, acc);
            }
        }
        out
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn save_gray_png(path: &Path, side: usize, values: &[u8]) -> Result<()> {
    let mut out = GrayImage::new(side as u32, side as u32);
    for (i, &v) in values.iter().enumerate() {
        out.put_pixel((i % side) as u32, (i / side) as u32, Luma([v]));
    }
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// For each output index, the (source index, weight) taps of 1-D linear
/// interpolation with half-pixel centers; negative source coordinates clamp
/// to zero. Weights of each output sum to one.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            if i1 == i0 || w1 == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - w1), (i1, w1)]
            }
        })
        .collect()
}

/// Linear operator resizing a flattened `in_side x in_side` map (row-major)
/// to `out_side x out_side`: shape `(out_side^2, in_side^2)`.
pub fn resize_operator(in_side: usize, out_side: usize) -> Matrix {
    let taps = bilinear_taps(in_side, out_side);
    let mut m = Matrix::zeros(out_side * out_side, in_side * in_side);
    for (y, ty) in taps.iter().enumerate() {
        for (x, tx) in taps.iter().enumerate() {
            for &(sy, fy) in ty {
                for &(sx, fx) in tx {
                    let idx = (sy * in_side + sx, y * out_side + x);
                    let cur = m.get(idx.1, idx.0);
                    m.set(idx.1, idx.0, cur + fy * fx);
                }
            }
        }
    }
    m
}
