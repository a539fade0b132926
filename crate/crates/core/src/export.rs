//! Output artifacts: decomposition renders, meshes, images and metrics.

mod mcubes;
mod mesh;
mod metrics;

pub use mcubes::{default_iso, marching_cubes, MeshOptions, DEFAULT_ISO_OPTICAL_DEPTH};
pub use mesh::{box_mesh, uv_sphere, TriMesh};
pub use metrics::{
    closest_point_on_triangle, geometry_fscore, geometry_fscore_with, mass_fraction, mse, psnr, sample_surface,
    FScore, TriangleIndex, DEFAULT_SAMPLE_COUNT, DEFAULT_SAMPLE_SEED, PSNR_CAP,
};

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb as PixelRgb};
use serde::Serialize;

use crate::diffplane::{blend, signed_to_display, DifferencePlane};
use crate::error::{Error, Result};
use crate::raster::{linear_to_srgb, RgbImage};
use crate::renderer::render_image;
use crate::scene_io::CameraView;
use crate::volume::{SkipMask, VoxelGrid};

/// Lambertian render plus, for training views, the plane-blended render and
/// the view-dependent residual.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// `H_d` composited over the background.
    pub lambertian: RgbImage,
    /// `Ĥ`.
    pub full: Option<RgbImage>,
    /// `Ĥ - H_d` encoded around mid-grey.
    pub specular: Option<RgbImage>,
    /// Same with the display gain applied first.
    pub specular_bright: Option<RgbImage>,
    /// Raw signed `Ĥ - H_d` per pixel.
    pub residual: Option<Vec<[f64; 3]>>,
}

impl Decomposition {
    /// Per-pixel `Σ_k |Ĥ_k - H_{d,k}|`.
    pub fn residual_mass(&self) -> Option<Vec<f64>> {
        self.residual
            .as_ref()
            .map(|r| r.iter().map(|p| p.iter().map(|v| v.abs()).sum()).collect())
    }
}

/// Without a plane (novel views) only the Lambertian image is produced.
pub fn render_decomposition(
    grid: &VoxelGrid,
    view: &CameraView,
    plane: Option<&DifferencePlane>,
    step: f64,
    skip: Option<&SkipMask>,
    background: [f64; 3],
    gain: f64,
) -> Result<Decomposition> {
    let rendered = render_image(grid, view, step, skip, background)?;
    let Some(plane) = plane else {
        log::warn!("view {} has no difference plane; writing the Lambertian image only", view.name);
        return Ok(Decomposition {
            lambertian: rendered.color,
            full: None,
            specular: None,
            specular_bright: None,
            residual: None,
        });
    };
    if plane.width != view.width() || plane.height != view.height() {
        return Err(Error::Argument(format!(
            "plane {}x{} does not match view {}",
            plane.width, plane.height, view.name
        )));
    }
    let (w, h) = (view.width(), view.height());
    let mut full = RgbImage::new(w, h, [0.0; 3]);
    let mut spec = RgbImage::new(w, h, [0.0; 3]);
    let mut bright = RgbImage::new(w, h, [0.0; 3]);
    let mut residual = Vec::with_capacity(w * h);
    let to_f64 = |p: [f32; 3]| [p[0] as f64, p[1] as f64, p[2] as f64];
    let to_f32 = |p: [f64; 3]| [p[0] as f32, p[1] as f32, p[2] as f32];
    for y in 0..h {
        for x in 0..w {
            let hd = to_f64(rendered.color.get(x, y));
            let r = to_f64(view.reference_image.get(x, y));
            let hh = blend(&hd, &r, plane.get(x, y), plane.sigma_s);
            let d = [hh[0] - hd[0], hh[1] - hd[1], hh[2] - hd[2]];
            full.set(x, y, to_f32(hh));
            spec.set(x, y, to_f32(signed_to_display(&d, 1.0)));
            bright.set(x, y, to_f32(signed_to_display(&d, gain)));
            residual.push(d);
        }
    }
    Ok(Decomposition {
        lambertian: rendered.color,
        full: Some(full),
        specular: Some(spec),
        specular_bright: Some(bright),
        residual: Some(residual),
    })
}

/// 8-bit sRGB PNG of a linear image.
pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let buf = ImageBuffer::<PixelRgb<u8>, Vec<u8>>::from_fn(img.width as u32, img.height as u32, |x, y| {
        let p = img.get(x as usize, y as usize);
        PixelRgb(p.map(|c| (linear_to_srgb((c as f64).clamp(0.0, 1.0)) * 255.0).round() as u8))
    });
    buf.save(path)?;
    Ok(())
}

/// Writes the display-encoded images already in `[0, 1]` without the sRGB
/// curve, so mid-grey stays 128.
pub fn write_png_raw(path: &Path, img: &RgbImage) -> Result<()> {
    let buf = ImageBuffer::<PixelRgb<u8>, Vec<u8>>::from_fn(img.width as u32, img.height as u32, |x, y| {
        let p = img.get(x as usize, y as usize);
        PixelRgb(p.map(|c| ((c as f64).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path)?;
    Ok(())
}

/// Writes the four panels as `<stem>_lambertian.png`, `<stem>_full.png`,
/// `<stem>_specular.png` and `<stem>_specular_x<gain>.png`.
pub fn write_decomposition(dir: &Path, stem: &str, d: &Decomposition, gain: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(&dir.join(format!("{stem}_lambertian.png")), &d.lambertian)?;
    if let (Some(full), Some(spec), Some(bright)) = (&d.full, &d.specular, &d.specular_bright) {
        write_png(&dir.join(format!("{stem}_full.png")), full)?;
        write_png_raw(&dir.join(format!("{stem}_specular.png")), spec)?;
        write_png_raw(&dir.join(format!("{stem}_specular_x{gain}.png")), bright)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb, Vec3};
    use crate::raster::RgbImage;
    use crate::scene_io::{CameraIntrinsics, CameraPose};
    use rand::{Rng, SeedableRng};

    fn setup() -> (VoxelGrid, CameraView) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut g = VoxelGrid::new([5; 3], Aabb::centered_cube(1.0), 0.0, [0.0; 3]).unwrap();
        for i in 0..g.voxel_count() {
            g.density[i] = rng.random_range(0.0..4.0);
            g.color[i] = [rng.random(), rng.random(), rng.random()];
        }
        let mut img = RgbImage::new(10, 10, [0.0; 3]);
        img.data.iter_mut().for_each(|p| *p = [rng.random(), rng.random(), rng.random()]);
        let view = CameraView {
            name: "v".into(),
            intrinsics: CameraIntrinsics::from_fov_x(10, 10, 0.8),
            pose: CameraPose::look_at(Vec3::new(0.0, -3.5, 1.0), Vec3::zeros(), Vec3::z()).unwrap(),
            reference_image: img,
            background_mask: None,
        };
        (g, view)
    }

    #[test]
    fn zero_plane_gives_identical_panels() {
        let (g, v) = setup();
        let plane = DifferencePlane::new(10, 10, 0.002);
        let d = render_decomposition(&g, &v, Some(&plane), 0.05, None, [1.0; 3], 4.0).unwrap();
        assert_eq!(d.full.as_ref().unwrap(), &d.lambertian);
        for img in [d.specular.as_ref().unwrap(), d.specular_bright.as_ref().unwrap()] {
            assert!(img.data.iter().flatten().all(|&c| c == 0.5));
        }
    }

    #[test]
    fn panels_follow_blend_algebra() {
        let (g, v) = setup();
        let mut plane = DifferencePlane::new(10, 10, 0.002);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        plane.alpha.iter_mut().for_each(|a| *a = rng.random_range(0.0..2000.0));
        let d = render_decomposition(&g, &v, Some(&plane), 0.05, None, [1.0; 3], 4.0).unwrap();
        let full = d.full.as_ref().unwrap();
        let res = d.residual.as_ref().unwrap();
        for y in 0..10 {
            for x in 0..10 {
                let hd = d.lambertian.get(x, y);
                let r = v.reference_image.get(x, y);
                let b = -(-plane.get(x, y) * 0.002f64).exp_m1();
                for c in 0..3 {
                    let expect = hd[c] as f64 + b * (r[c] as f64 - hd[c] as f64);
                    assert!((full.get(x, y)[c] as f64 - expect).abs() < 1e-6);
                    assert!((hd[c] as f64 + res[y * 10 + x][c] - full.get(x, y)[c] as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn novel_view_gets_lambertian_only() {
        let (g, v) = setup();
        let d = render_decomposition(&g, &v, None, 0.05, None, [1.0; 3], 4.0).unwrap();
        assert!(d.full.is_none() && d.residual_mass().is_none());
    }

    #[test]
    fn png_outputs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (g, v) = setup();
        let plane = DifferencePlane::new(10, 10, 0.002);
        let d = render_decomposition(&g, &v, Some(&plane), 0.05, None, [1.0; 3], 4.0).unwrap();
        write_decomposition(dir.path(), "v0", &d, 4.0).unwrap();
        let spec = image::open(dir.path().join("v0_specular.png")).unwrap().to_rgb8();
        assert!(spec.pixels().all(|p| p.0 == [128, 128, 128]));
        assert!(dir.path().join("v0_specular_x4.png").exists());
    }
}
