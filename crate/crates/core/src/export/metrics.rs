//! Image and geometry metrics.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mesh::TriMesh;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::raster::RgbImage;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_SAMPLE_COUNT: usize = 20_000;
pub const DEFAULT_SAMPLE_SEED: u64 = 7;

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Argument(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] as f64 - q[c] as f64).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.data.len()).max(1) as f64)
}

/// `10 log10(1 / MSE)` over linear channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Area-weighted uniform samples on the surface.
pub fn sample_surface(mesh: &TriMesh, count: usize, seed: u64) -> Vec<Vec3> {
    if mesh.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += 0.5 * mesh.face_normal(f).norm();
        cdf.push(acc);
    }
    if acc <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            let f = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(f);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect()
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Uniform hash of triangles for radius-limited distance queries.
pub struct TriangleIndex<'a> {
    mesh: &'a TriMesh,
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<u32>>,
}

impl<'a> TriangleIndex<'a> {
    pub fn new(mesh: &'a TriMesh, cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for f in 0..mesh.faces.len() {
            let [a, b, c] = mesh.triangle(f);
            let lo = a.inf(&b).inf(&c);
            let hi = a.sup(&b).sup(&c);
            let lo = lo.map(|v| (v / cell).floor() as i64);
            let hi = hi.map(|v| (v / cell).floor() as i64);
            for x in lo.x..=hi.x {
                for y in lo.y..=hi.y {
                    for z in lo.z..=hi.z {
                        buckets.entry([x, y, z]).or_default().push(f as u32);
                    }
                }
            }
        }
        Self { mesh, cell, buckets }
    }

    /// Distance to the nearest triangle if it is within `radius` (which must
    /// not exceed the cell size).
    pub fn distance_within(&self, p: &Vec3, radius: f64) -> Option<f64> {
        let c = p.map(|v| (v / self.cell).floor() as i64);
        let mut best = f64::INFINITY;
        for x in c.x - 1..=c.x + 1 {
            for y in c.y - 1..=c.y + 1 {
                for z in c.z - 1..=c.z + 1 {
                    let Some(list) = self.buckets.get(&[x, y, z]) else {
                        continue;
                    };
                    for &f in list {
                        let [a, b, t] = self.mesh.triangle(f as usize);
                        best = best.min((closest_point_on_triangle(p, &a, &b, &t) - p).norm());
                    }
                }
            }
        }
        (best <= radius).then_some(best)
    }
}

fn fraction_within(points: &[Vec3], mesh: &TriMesh, tau: f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let index = TriangleIndex::new(mesh, tau);
    let hits = points
        .iter()
        .filter(|p| index.distance_within(p, tau).is_some())
        .count();
    hits as f64 / points.len() as f64
}

/// Precision: share of `mesh` samples within `tau` of `reference`. Recall:
/// share of `reference` samples within `tau` of `mesh`.
pub fn geometry_fscore(mesh: &TriMesh, reference: &TriMesh, tau: f64) -> FScore {
    geometry_fscore_with(mesh, reference, tau, DEFAULT_SAMPLE_COUNT, DEFAULT_SAMPLE_SEED)
}

pub fn geometry_fscore_with(mesh: &TriMesh, reference: &TriMesh, tau: f64, count: usize, seed: u64) -> FScore {
    let zero = FScore {
        precision: 0.0,
        recall: 0.0,
        f: 0.0,
    };
    if mesh.is_empty() || reference.is_empty() || tau <= 0.0 {
        return zero;
    }
    let precision = fraction_within(&sample_surface(mesh, count, seed), reference, tau);
    let recall = fraction_within(&sample_surface(reference, count, seed ^ 0x5eed), mesh, tau);
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    FScore { precision, recall, f }
}

/// Share of the total mass that falls on `mask` pixels after dilating the
/// mask by `dilate` pixels (Chebyshev distance).
pub fn mass_fraction(mass: &[f64], mask: &[bool], width: usize, height: usize, dilate: usize) -> f64 {
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let d = dilate as isize;
    let mut inside = 0.0;
    for y in 0..height {
        for x in 0..width {
            let hit = (-d..=d).any(|dy| {
                (-d..=d).any(|dx| {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    xx >= 0
                        && yy >= 0
                        && (xx as usize) < width
                        && (yy as usize) < height
                        && mask[yy as usize * width + xx as usize]
                })
            });
            if hit {
                inside += mass[y * width + x];
            }
        }
    }
    inside / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::export::mesh::{box_mesh, uv_sphere};

    #[test]
    fn psnr_cases() {
        let a = RgbImage::new(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = RgbImage::new(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &RgbImage::new(3, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = RgbImage::new(9, 7, [0.0; 3]);
        let mut b = a.clone();
        for (p, q) in a.data.iter_mut().zip(b.data.iter_mut()) {
            *p = [rng.random(), rng.random(), rng.random()];
            *q = [rng.random(), rng.random(), rng.random()];
        }
        let mut s = 0.0;
        for i in 0..a.data.len() {
            for c in 0..3 {
                s += (a.data[i][c] as f64 - b.data[i][c] as f64).powi(2);
            }
        }
        let expect = 10.0 * (1.0 / (s / (63.0 * 3.0))).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::zeros(), Vec3::x(), Vec3::y());
        let q = |p: Vec3| closest_point_on_triangle(&p, &a, &b, &c);
        assert!((q(Vec3::new(0.2, 0.2, 1.0)) - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        assert_eq!(q(Vec3::new(-1.0, -1.0, 0.0)), a);
        assert_eq!(q(Vec3::new(2.0, -0.5, 0.0)), b);
        assert!((q(Vec3::new(1.0, 1.0, 0.0)) - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
        assert!((q(Vec3::new(0.5, -1.0, 3.0)) - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn samples_lie_on_the_surface() {
        let m = uv_sphere(Vec3::zeros(), 1.0, 64, 32);
        let pts = sample_surface(&m, 2000, 1);
        assert!(pts.iter().all(|p| (p.norm() - 1.0).abs() < 5e-3));
        // roughly uniform over hemispheres
        let up = pts.iter().filter(|p| p.z > 0.0).count() as f64 / 2000.0;
        assert!((up - 0.5).abs() < 0.05);
        assert_eq!(pts, sample_surface(&m, 2000, 1));
    }

    #[test]
    fn fscore_cases() {
        let s = uv_sphere(Vec3::zeros(), 0.5, 48, 24);
        let same = geometry_fscore_with(&s, &s, 0.01, 3000, 2);
        assert_eq!(same.f, 1.0);
        let far = s.translated(&Vec3::new(5.0, 0.0, 0.0));
        assert_eq!(geometry_fscore_with(&far, &s, 0.05, 3000, 2).f, 0.0);
        assert_eq!(geometry_fscore_with(&TriMesh::default(), &s, 0.05, 3000, 2).f, 0.0);

        let mut blob = s.clone();
        blob.append(&box_mesh(Vec3::new(0.8, 0.8, 0.8), Vec3::new(1.0, 1.0, 1.0)));
        let r = geometry_fscore_with(&blob, &s, 0.02, 4000, 3);
        assert!(r.precision < 0.95, "{r:?}");
        assert!(r.recall > 0.99, "{r:?}");
    }

    #[test]
    fn mass_fraction_dilation() {
        let (w, h) = (5, 5);
        let mut mask = vec![false; 25];
        mask[12] = true;
        let mut mass = vec![0.0; 25];
        mass[12] = 1.0;
        mass[0] = 1.0;
        assert_eq!(mass_fraction(&mass, &mask, w, h, 0), 0.5);
        assert_eq!(mass_fraction(&mass, &mask, w, h, 1), 0.5);
        assert_eq!(mass_fraction(&mass, &mask, w, h, 2), 1.0);
        assert_eq!(mass_fraction(&[0.0; 25], &mask, w, h, 2), 0.0);
    }
}
