//! Central finite differences against the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Objective;
use crate::diffplane::DifferencePlane;
use crate::error::Result;
use crate::geometry::{Aabb, Vec3};
use crate::raster::RgbImage;
use crate::scene_io::{CameraIntrinsics, CameraPose, CameraView};
use crate::volume::VoxelGrid;

/// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub max_rel_error: f64,
    pub density: f64,
    pub color: f64,
    pub alpha: f64,
    pub worst: String,
    pub checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Perturbs every variable by `±eps · max(|x|, 1)` and compares the
/// centered difference of the total objective with the analytic gradient.
pub fn check_gradients(
    objective: &Objective,
    grid: &VoxelGrid,
    planes: &[DifferencePlane],
    eps: f64,
) -> Result<GradientReport> {
    let (_, grads) = objective.evaluate(grid, planes)?;
    let mut report = GradientReport {
        max_rel_error: 0.0,
        density: 0.0,
        color: 0.0,
        alpha: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let record = |report: &mut GradientReport, group: &str, index: String, a: f64, n: f64| {
        let e = rel_error(a, n);
        let slot = match group {
            "density" => &mut report.density,
            "color" => &mut report.color,
            _ => &mut report.alpha,
        };
        *slot = slot.max(e);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = format!("{group}[{index}]: analytic {a:e}, numeric {n:e}");
        }
    };

    let mut g = grid.clone();
    for i in 0..grid.voxel_count() {
        let x = grid.density[i];
        let h = eps * x.abs().max(1.0);
        g.density[i] = x + h;
        let fp = objective.value(&g, planes)?.total();
        g.density[i] = x - h;
        let fm = objective.value(&g, planes)?.total();
        g.density[i] = x;
        record(&mut report, "density", i.to_string(), grads.density[i], (fp - fm) / (2.0 * h));
        for c in 0..3 {
            let x = grid.color[i][c];
            let h = eps * x.abs().max(1.0);
            g.color[i][c] = x + h;
            let fp = objective.value(&g, planes)?.total();
            g.color[i][c] = x - h;
            let fm = objective.value(&g, planes)?.total();
            g.color[i][c] = x;
            record(&mut report, "color", format!("{i}.{c}"), grads.color[i][c], (fp - fm) / (2.0 * h));
        }
    }

    let mut p = planes.to_vec();
    for k in 0..planes.len() {
        for i in 0..planes[k].alpha.len() {
            let x = planes[k].alpha[i];
            let h = eps * x.abs().max(1.0);
            p[k].alpha[i] = x + h;
            let fp = objective.value(grid, &p)?.total();
            p[k].alpha[i] = x - h;
            let fm = objective.value(grid, &p)?.total();
            p[k].alpha[i] = x;
            record(&mut report, "alpha", format!("{k}.{i}"), grads.alpha[k][i], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

pub struct GradientInstance {
    pub grid: VoxelGrid,
    pub views: Vec<CameraView>,
    pub planes: Vec<DifferencePlane>,
    pub weights: Vec<f64>,
}

/// Random 4³ grid seen by two 8×8 cameras with random references and
/// plane values.
pub fn random_instance(seed: u64) -> GradientInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = VoxelGrid::new([4; 3], Aabb::centered_cube(1.0), 0.0, [0.0; 3]).unwrap();
    for d in grid.density.iter_mut() {
        *d = rng.random_range(0.1..3.0);
    }
    for c in grid.color.iter_mut() {
        *c = [rng.random(), rng.random(), rng.random()];
    }
    let eyes = [Vec3::new(3.0, -2.0, 1.0), Vec3::new(-2.5, -2.5, -1.5)];
    let views: Vec<CameraView> = eyes
        .iter()
        .enumerate()
        .map(|(i, eye)| {
            let mut img = RgbImage::new(8, 8, [0.0; 3]);
            for p in img.data.iter_mut() {
                *p = [rng.random(), rng.random(), rng.random()];
            }
            CameraView {
                name: format!("cam{i}"),
                intrinsics: CameraIntrinsics::from_fov_x(8, 8, 0.7),
                pose: CameraPose::look_at(*eye, Vec3::zeros(), Vec3::z()).unwrap(),
                reference_image: img,
                background_mask: None,
            }
        })
        .collect();
    let planes = views
        .iter()
        .map(|_| {
            let mut p = DifferencePlane::new(8, 8, 0.002);
            for a in p.alpha.iter_mut() {
                *a = rng.random_range(0.0..800.0);
            }
            p
        })
        .collect();
    let weights = (0..grid.voxel_count()).map(|_| rng.random_range(0.0..0.5)).collect();
    GradientInstance {
        grid,
        views,
        planes,
        weights,
    }
}
