//! Per-camera difference planes.
//!
//! Each training view owns one scalar `α_s` per pixel. The rendered
//! Lambertian color `H_d` is pulled toward the reference color `r` by the
//! blend factor `1 - e^{-α_s σ_s}`:
//!
//! ```text
//! Ĥ = (1 - e^{-α_s σ_s}) (r - H_d) + H_d
//! ```
//!
//! so a pixel whose color cannot be explained by the volume can be absorbed
//! by its plane instead of bending the geometry.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::linear_taps;
use crate::snapshot::{read_snapshot, write_snapshot, SnapshotHeader, SNAPSHOT_VERSION};

pub const DEFAULT_SIGMA_S: f64 = 0.002;
/// Gain applied to the signed view-dependent image for the brightened panel.
pub const DEFAULT_DISPLAY_GAIN: f64 = 4.0;

const PLANE_MAGIC: [u8; 4] = *b"DPLN";

type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct DifferencePlane {
    pub width: usize,
    pub height: usize,
    /// Row-major `α_s`, non-negative.
    pub alpha: Vec<f64>,
    pub sigma_s: f64,
}

impl DifferencePlane {
    pub fn new(width: usize, height: usize, sigma_s: f64) -> Self {
        Self {
            width,
            height,
            alpha: vec![0.0; width * height],
            sigma_s,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.alpha[y * self.width + x]
    }

    pub fn project_constraints(&mut self) {
        for a in self.alpha.iter_mut() {
            if *a < 0.0 {
                *a = 0.0;
            }
        }
    }

    pub fn max_alpha(&self) -> f64 {
        self.alpha.iter().cloned().fold(0.0, f64::max)
    }

    /// Bilinear resample to `(width, height)`; pixel centers align as in the
    /// box-filtered image pyramid.
    pub fn upsample(&self, width: usize, height: usize) -> Result<Self> {
        if width < self.width || height < self.height {
            return Err(Error::Argument(format!(
                "cannot upsample plane {}x{} to smaller {width}x{height}",
                self.width, self.height
            )));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = DifferencePlane::new(width, height, self.sigma_s);
        for y in 0..height {
            let (y0, y1, fy) = linear_taps((y as f64 + 0.5) * sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = linear_taps((x as f64 + 0.5) * sx, self.width);
                let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
                let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
                out.alpha[y * width + x] = top * (1.0 - fy) + bot * fy;
            }
        }
        Ok(out)
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let header = SnapshotHeader {
            magic: PLANE_MAGIC,
            version: SNAPSHOT_VERSION,
            dims: [self.width as u32, self.height as u32, 1],
            extra: [self.sigma_s as f32, 0.0, 0.0, 0.0, 0.0, 0.0],
        };
        let data: Vec<f32> = self.alpha.iter().map(|&a| a as f32).collect();
        write_snapshot(path, &header, &[&data])
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let (header, planes) = read_snapshot(path, PLANE_MAGIC, 1)?;
        Ok(Self {
            width: header.dims[0] as usize,
            height: header.dims[1] as usize,
            alpha: planes[0].iter().map(|&a| a as f64).collect(),
            sigma_s: header.extra[0] as f64,
        })
    }

    /// Heatmap of `α_s` normalized by its maximum (black, red, yellow, white).
    pub fn heatmap(&self) -> Vec<[u8; 3]> {
        let max = self.max_alpha();
        self.alpha
            .iter()
            .map(|&a| {
                let v = if max > 0.0 { a / max } else { 0.0 };
                let ramp = |lo: f64| ((v * 3.0 - lo).clamp(0.0, 1.0) * 255.0).round() as u8;
                [ramp(0.0), ramp(1.0), ramp(2.0)]
            })
            .collect()
    }
}

/// `1 - e^{-α_s σ_s}`, in `[0, 1)`.
pub fn blend_factor(alpha_s: f64, sigma_s: f64) -> f64 {
    -(-alpha_s * sigma_s).exp_m1()
}

pub fn blend(h_d: &Rgb, r: &Rgb, alpha_s: f64, sigma_s: f64) -> Rgb {
    let b = blend_factor(alpha_s, sigma_s);
    [
        b * (r[0] - h_d[0]) + h_d[0],
        b * (r[1] - h_d[1]) + h_d[1],
        b * (r[2] - h_d[2]) + h_d[2],
    ]
}

/// `∂Ĥ/∂α_s = σ_s e^{-α_s σ_s} (r - H_d)`.
pub fn d_blend_d_alpha(h_d: &Rgb, r: &Rgb, alpha_s: f64, sigma_s: f64) -> Rgb {
    let k = sigma_s * (-alpha_s * sigma_s).exp();
    [
        k * (r[0] - h_d[0]),
        k * (r[1] - h_d[1]),
        k * (r[2] - h_d[2]),
    ]
}

/// `e^{-α_s σ_s}`: the factor `∂Ĥ/∂H_d` that scales every volume gradient
/// flowing through the pixel.
pub fn volume_gradient_scale(alpha_s: f64, sigma_s: f64) -> f64 {
    (-alpha_s * sigma_s).exp()
}

/// Signed view-dependent part `Ĥ - H_d`.
pub fn specular_component(h_d: &Rgb, r: &Rgb, alpha_s: f64, sigma_s: f64) -> Rgb {
    let b = blend_factor(alpha_s, sigma_s);
    [
        b * (r[0] - h_d[0]),
        b * (r[1] - h_d[1]),
        b * (r[2] - h_d[2]),
    ]
}

/// Mid-grey-centered display encoding `0.5 + gain · x / 2`, clamped.
pub fn signed_to_display(x: &Rgb, gain: f64) -> Rgb {
    x.map(|v| (0.5 + 0.5 * gain * v).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rgb(rng: &mut ChaCha8Rng) -> Rgb {
        [rng.random(), rng.random(), rng.random()]
    }

    #[test]
    fn blend_limits() {
        let h = [0.2, 0.4, 0.6];
        let r = [0.9, 0.1, 0.3];
        assert_eq!(blend(&h, &r, 0.0, DEFAULT_SIGMA_S), h);
        let inf = blend(&h, &r, 1e9, DEFAULT_SIGMA_S);
        for c in 0..3 {
            assert!((inf[c] - r[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn blend_worked_value() {
        // α_s σ_s = 500 · 0.002 = 1
        let h = [0.2; 3];
        let r = [1.0, 0.0, 0.0];
        let out = blend(&h, &r, 500.0, 0.002);
        let k = 1.0 - (-1.0f64).exp();
        let expect = [0.2 + k * 0.8, 0.2 - k * 0.2, 0.2 - k * 0.2];
        for c in 0..3 {
            assert!((out[c] - expect[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn derivative_special_cases() {
        let h = [0.3, 0.5, 0.7];
        assert_eq!(d_blend_d_alpha(&h, &h, 123.0, 0.002), [0.0; 3]);
        let r = [0.1, 0.9, 0.2];
        let d = d_blend_d_alpha(&h, &r, 0.0, 0.002);
        for c in 0..3 {
            assert!((d[c] - 0.002 * (r[c] - h[c])).abs() < 1e-18);
        }
        assert_eq!(volume_gradient_scale(0.0, 0.002), 1.0);
        let half = volume_gradient_scale(std::f64::consts::LN_2 / 0.002, 0.002);
        assert!((half - 0.5).abs() < 1e-14);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let h = rgb(&mut rng);
            let r = rgb(&mut rng);
            let a = rng.random_range(0.0..2000.0);
            let s = DEFAULT_SIGMA_S;
            let eps = 1e-3;
            let d = d_blend_d_alpha(&h, &r, a, s);
            let hi = blend(&h, &r, a + eps, s);
            let lo = blend(&h, &r, a - eps, s);
            for c in 0..3 {
                let fd = (hi[c] - lo[c]) / (2.0 * eps);
                assert!((fd - d[c]).abs() <= 1e-6 * d[c].abs() + 1e-12, "{fd} vs {}", d[c]);
            }
            // sensitivity of Ĥ to H_d, one channel at a time
            let scale = volume_gradient_scale(a, s);
            for c in 0..3 {
                let mut hp = h;
                let mut hm = h;
                hp[c] += 1e-6;
                hm[c] -= 1e-6;
                let fd = (blend(&hp, &r, a, s)[c] - blend(&hm, &r, a, s)[c]) / 2e-6;
                assert!((fd - scale).abs() < 1e-6 * scale.max(1e-3));
            }
        }
    }

    #[test]
    fn specular_is_blend_minus_lambertian() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..1000 {
            let h = rgb(&mut rng);
            let r = rgb(&mut rng);
            let a = rng.random_range(0.0..3000.0);
            let spec = specular_component(&h, &r, a, 0.002);
            let full = blend(&h, &r, a, 0.002);
            for c in 0..3 {
                assert!((spec[c] - (full[c] - h[c])).abs() < 1e-12);
            }
        }
        assert_eq!(specular_component(&[0.1; 3], &[0.9; 3], 0.0, 0.002), [0.0; 3]);
        assert_eq!(specular_component(&[0.4; 3], &[0.4; 3], 99.0, 0.002), [0.0; 3]);
        assert_eq!(signed_to_display(&[0.0; 3], 4.0), [0.5; 3]);
        assert_eq!(signed_to_display(&[1.0, -1.0, 0.1], 4.0), [1.0, 0.0, 0.7]);
    }

    #[test]
    fn zero_sigma_disables_planes() {
        let h = [0.3, 0.2, 0.1];
        let r = [1.0, 1.0, 1.0];
        assert_eq!(blend(&h, &r, 1e6, 0.0), h);
        assert_eq!(d_blend_d_alpha(&h, &r, 1e6, 0.0), [0.0; 3]);
    }

    #[test]
    fn upsample_plane_cases() {
        let mut p = DifferencePlane::new(3, 2, 0.002);
        p.alpha.iter_mut().for_each(|a| *a = 7.0);
        let up = p.upsample(6, 4).unwrap();
        assert!(up.alpha.iter().all(|&a| (a - 7.0).abs() < 1e-12));
        assert_eq!(up.sigma_s, 0.002);
        assert_eq!(p.upsample(3, 2).unwrap(), p);
        assert!(p.upsample(2, 2).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut p = DifferencePlane::new(5, 4, 0.002);
        p.alpha.iter_mut().for_each(|a| *a = rng.random_range(0.0..100.0));
        let up = p.upsample(10, 8).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                // parent coordinates of the child center, clamped to the edge centers
                let u = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 4.0);
                let v = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 3.0);
                let mut expect = 0.0;
                for py in 0..4 {
                    for px in 0..5 {
                        let w = (1.0 - (u - px as f64).abs()).max(0.0)
                            * (1.0 - (v - py as f64).abs()).max(0.0);
                        expect += w * p.get(px, py);
                    }
                }
                assert!((up.get(x, y) - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mut p = DifferencePlane::new(4, 3, 0.002);
        p.alpha[5] = 12.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dpl");
        p.write_snapshot(&path).unwrap();
        let q = DifferencePlane::read_snapshot(&path).unwrap();
        assert_eq!(q.alpha[5], 12.5);
        assert_eq!((q.width, q.height), (4, 3));
        assert!((q.sigma_s - 0.002).abs() < 1e-9);
        assert_eq!(p.heatmap()[5], [255, 255, 255]);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn channel() -> impl Strategy<Value = f64> {
            0.0..=1.0f64
        }

        proptest! {
            #[test]
            fn blend_stays_on_segment_and_is_monotone(
                h in [channel(), channel(), channel()],
                r in [channel(), channel(), channel()],
                a in 0.0..5000.0f64,
                da in 0.0..500.0f64,
            ) {
                let out = blend(&h, &r, a, DEFAULT_SIGMA_S);
                let further = blend(&h, &r, a + da, DEFAULT_SIGMA_S);
                for c in 0..3 {
                    let (lo, hi) = if h[c] <= r[c] { (h[c], r[c]) } else { (r[c], h[c]) };
                    prop_assert!(out[c] >= lo - 1e-15 && out[c] <= hi + 1e-15);
                    prop_assert!((further[c] - r[c]).abs() <= (out[c] - r[c]).abs() + 1e-15);
                }
            }
        }
    }
}
