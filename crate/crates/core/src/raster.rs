//! Small dense raster types shared by the loaders, renderer and exporters.

use crate::error::{Error, Result};

/// Linear-space RGB image, row-major, `data[y * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

/// Single-channel raster (alpha masks, transmittance maps).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Taps for linear interpolation at continuous coordinate `u` (pixel centers
/// at `i + 0.5`), clamped to the edge.
pub(crate) fn linear_taps(u: f64, n: usize) -> (usize, usize, f64) {
    let x = u - 0.5;
    if n == 1 || x <= 0.0 {
        return (0, 0, 0.0);
    }
    let max = (n - 1) as f64;
    if x >= max {
        return (n - 1, n - 1, 0.0);
    }
    let i0 = x.floor() as usize;
    (i0, i0 + 1, x - i0 as f64)
}

fn check_factor(width: usize, height: usize, factor: usize) -> Result<(usize, usize)> {
    if factor < 1 {
        return Err(Error::Argument("downsample factor must be >= 1".into()));
    }
    let (w, h) = (width / factor, height / factor);
    if w == 0 || h == 0 {
        return Err(Error::Argument(format!(
            "factor {factor} too large for {width}x{height} image"
        )));
    }
    Ok((w, h))
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [f32; 3]) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for p in &self.data {
            for c in 0..3 {
                acc[c] += p[c] as f64;
            }
        }
        let n = self.data.len().max(1) as f64;
        acc.map(|a| a / n)
    }

    /// Box filter by an integer factor. Trailing rows/columns that do not
    /// fill a whole block are dropped.
    pub fn box_downsample(&self, factor: usize) -> Result<Self> {
        let (w, h) = check_factor(self.width, self.height, factor)?;
        if factor == 1 {
            return Ok(self.clone());
        }
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = RgbImage::new(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.get(x * factor + dx, y * factor + dy);
                        for c in 0..3 {
                            acc[c] += p[c] as f64;
                        }
                    }
                }
                out.set(x, y, acc.map(|a| (a * norm) as f32));
            }
        }
        Ok(out)
    }

    /// Bilinear fetch at continuous pixel coordinates (pixel centers at
    /// `i + 0.5`), clamped at the border.
    pub fn bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let (x0, x1, fx) = linear_taps(u, self.width);
        let (y0, y1, fy) = linear_taps(v, self.height);
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
            let bot = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn box_downsample(&self, factor: usize) -> Result<Self> {
        let (w, h) = check_factor(self.width, self.height, factor)?;
        if factor == 1 {
            return Ok(self.clone());
        }
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = GrayImage::new(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += self.get(x * factor + dx, y * factor + dy) as f64;
                    }
                }
                out.data[y * w + x] = (acc * norm) as f32;
            }
        }
        Ok(out)
    }
}
