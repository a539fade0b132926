//! Fixed-step ray marching and emission-absorption accumulation.
//!
//! Samples sit at `t_enter + k * step` (left end of each segment) with
//! `δ_k = min(step, t_exit - t_k)`, so the segment lengths sum to the clipped
//! ray length exactly. No jitter: gradients are deterministic.

use std::ops::ControlFlow;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Ray, Vec3};
use crate::raster::{GrayImage, RgbImage};
use crate::scene_io::CameraView;
use crate::volume::{SkipMask, Stencil, VoxelGrid};

/// Step length as a fraction of the voxel edge.
pub const DEFAULT_STEP_FACTOR: f64 = 0.5;

pub fn default_step(grid: &VoxelGrid) -> f64 {
    DEFAULT_STEP_FACTOR * grid.voxel_edge()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub t: f64,
    pub position: Vec3,
    pub delta: f64,
    pub stencil: Stencil,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RaySampleList {
    pub samples: Vec<RaySample>,
    /// Clip interval against the grid box; `None` when the ray misses.
    pub interval: Option<(f64, f64)>,
}

impl RaySampleList {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayAccumulation {
    /// Lambertian color accumulated through the volume, without background.
    pub color: [f64; 3],
    /// Throughput remaining after the last sample.
    pub t_total: f64,
    /// `e^{-V_j}`: throughput in front of sample `j`.
    pub transmittance: Vec<f64>,
}

impl RayAccumulation {
    pub fn composited(&self, background: &[f64; 3]) -> [f64; 3] {
        [
            self.color[0] + self.t_total * background[0],
            self.color[1] + self.t_total * background[1],
            self.color[2] + self.t_total * background[2],
        ]
    }
}

pub(crate) fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("march step must be positive, got {step}")))
    }
}

/// Samples along `ray` inside the grid box.
pub fn march(grid: &VoxelGrid, ray: &Ray, step: f64, skip: Option<&SkipMask>) -> Result<RaySampleList> {
    check_step(step)?;
    let mut out = RaySampleList::default();
    march_into(grid, ray, f64::INFINITY, step, skip, &mut out);
    Ok(out)
}

/// Like [`march`] but stops at parameter `t_max`.
pub fn march_segment(
    grid: &VoxelGrid,
    ray: &Ray,
    t_max: f64,
    step: f64,
    skip: Option<&SkipMask>,
) -> Result<RaySampleList> {
    check_step(step)?;
    let mut out = RaySampleList::default();
    march_into(grid, ray, t_max, step, skip, &mut out);
    Ok(out)
}

/// Allocation-reusing core of [`march`]; `step` must already be valid.
pub(crate) fn march_into(
    grid: &VoxelGrid,
    ray: &Ray,
    t_max: f64,
    step: f64,
    skip: Option<&SkipMask>,
    out: &mut RaySampleList,
) {
    out.samples.clear();
    out.interval = visit_samples(grid, ray, t_max, step, skip, |s| {
        out.samples.push(s);
        ControlFlow::Continue(())
    });
}

/// Calls `visit` for every sample [`march`] would produce, in order, until
/// it breaks. Returns the clipped ray interval.
pub(crate) fn visit_samples(
    grid: &VoxelGrid,
    ray: &Ray,
    t_max: f64,
    step: f64,
    skip: Option<&SkipMask>,
    mut visit: impl FnMut(RaySample) -> ControlFlow<()>,
) -> Option<(f64, f64)> {
    let bbox = grid.bbox();
    let (t0, t1) = ray.clip(bbox)?;
    let t1 = t1.min(t_max);
    if t1 <= t0 {
        return None;
    }
    let length = t1 - t0;
    let count = ((length / step) - 1e-9).ceil().max(1.0) as usize;
    let lo = bbox.min_v();
    let hi = bbox.max_v();
    for k in 0..count {
        let t = t0 + k as f64 * step;
        let delta = step.min(t1 - t);
        if delta <= 0.0 {
            break;
        }
        let p = ray.at(t);
        let position = Vec3::new(
            p.x.clamp(lo.x, hi.x),
            p.y.clamp(lo.y, hi.y),
            p.z.clamp(lo.z, hi.z),
        );
        if let Some(mask) = skip {
            if mask.is_empty_at(&position) {
                continue;
            }
        }
        let stencil = grid
            .stencil(&position)
            .expect("clamped sample lies inside the grid box");
        let sample = RaySample {
            t,
            position,
            delta,
            stencil,
        };
        if visit(sample).is_break() {
            break;
        }
    }
    Some((t0, t1))
}

/// Optical depth `Σ σ_j δ_j` along the segment, stopping once it exceeds
/// `limit`.
pub fn optical_depth(grid: &VoxelGrid, ray: &Ray, t_max: f64, step: f64, skip: Option<&SkipMask>, limit: f64) -> Result<f64> {
    check_step(step)?;
    let mut depth = 0.0;
    visit_samples(grid, ray, t_max, step, skip, |s| {
        depth += grid.interpolate_density(&s.stencil) * s.delta;
        if depth > limit {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    Ok(depth)
}

/// Emission-absorption sum `H = Σ_j T_j (1 - e^{-σ_j δ_j}) c_j` with
/// `T_j = e^{-Σ_{k<j} σ_k δ_k}`.
pub fn accumulate(grid: &VoxelGrid, samples: &RaySampleList) -> Result<RayAccumulation> {
    let mut color = [0.0; 3];
    let mut optical_depth = 0.0f64;
    let mut transmittance = Vec::with_capacity(samples.len());
    for s in &samples.samples {
        let (sigma, c) = grid.interpolate(&s.stencil);
        if !sigma.is_finite() || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite sample at t = {} (σ = {sigma}, c = {c:?})",
                s.t
            )));
        }
        let t_here = (-optical_depth).exp();
        transmittance.push(t_here);
        let alpha = 1.0 - (-sigma * s.delta).exp();
        let w = t_here * alpha;
        color[0] += w * c[0];
        color[1] += w * c[1];
        color[2] += w * c[2];
        optical_depth += sigma * s.delta;
    }
    Ok(RayAccumulation {
        color,
        t_total: (-optical_depth).exp(),
        transmittance,
    })
}

/// Throughput `e^{-Σ σ δ}` over the samples; used by visibility queries.
pub fn transmittance(grid: &VoxelGrid, samples: &RaySampleList) -> f64 {
    let depth: f64 = samples
        .samples
        .iter()
        .map(|s| grid.interpolate_density(&s.stencil) * s.delta)
        .sum();
    (-depth).exp()
}

pub struct RenderedView {
    /// `H_d + T · background`.
    pub color: RgbImage,
    pub transmittance: GrayImage,
}

/// Renders every pixel center of `view` and composites over `background`.
pub fn render_image(
    grid: &VoxelGrid,
    view: &CameraView,
    step: f64,
    skip: Option<&SkipMask>,
    background: [f64; 3],
) -> Result<RenderedView> {
    check_step(step)?;
    let (w, h) = (view.width(), view.height());
    let rows: Vec<Result<Vec<([f32; 3], f32)>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut scratch = RaySampleList::default();
            (0..w)
                .map(|x| {
                    let ray = view.ray_through(x as f64 + 0.5, y as f64 + 0.5);
                    march_into(grid, &ray, f64::INFINITY, step, skip, &mut scratch);
                    let acc = accumulate(grid, &scratch)?;
                    let c = acc.composited(&background);
                    Ok(([c[0] as f32, c[1] as f32, c[2] as f32], acc.t_total as f32))
                })
                .collect()
        })
        .collect();
    let mut color = RgbImage::new(w, h, [0.0; 3]);
    let mut trans = GrayImage::new(w, h, 0.0);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, t)) in row?.into_iter().enumerate() {
            color.set(x, y, c);
            trans.data[y * w + x] = t;
        }
    }
    Ok(RenderedView {
        color,
        transmittance: trans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use crate::scene_io::{CameraIntrinsics, CameraPose};
    use crate::volume::build_skip_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(n: usize, density: f64, color: [f64; 3]) -> VoxelGrid {
        VoxelGrid::new(
            [n; 3],
            Aabb::new(Vec3::zeros(), Vec3::repeat(1.0)),
            density,
            color,
        )
        .unwrap()
    }

    fn random_grid(n: usize, seed: u64) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = VoxelGrid::new([n; 3], Aabb::centered_cube(1.0), 0.0, [0.0; 3]).unwrap();
        for i in 0..g.voxel_count() {
            g.density[i] = rng.random_range(0.0..3.0);
            g.color[i] = [rng.random(), rng.random(), rng.random()];
        }
        g
    }

    #[test]
    fn miss_gives_empty_list() {
        let g = unit_grid(4, 1.0, [1.0; 3]);
        let ray = Ray::new(Vec3::new(-1.0, 5.0, 0.5), Vec3::x());
        let s = march(&g, &ray, 0.1, None).unwrap();
        assert!(s.is_empty() && s.interval.is_none());
        let acc = accumulate(&g, &s).unwrap();
        assert_eq!(acc.color, [0.0; 3]);
        assert_eq!(acc.t_total, 1.0);
        assert!(march(&g, &ray, 0.0, None).is_err());
    }

    #[test]
    fn axis_aligned_four_samples() {
        let g = unit_grid(4, 1.0, [1.0; 3]);
        let ray = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::x());
        let s = march(&g, &ray, 0.25, None).unwrap();
        assert_eq!(s.len(), 4);
        for (k, smp) in s.samples.iter().enumerate() {
            assert!((smp.delta - 0.25).abs() < 1e-12);
            assert!((smp.position.x - 0.25 * k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_match_slab_oracle() {
        let g = random_grid(4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let origin = Vec3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let target = Vec3::new(
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
            );
            let ray = Ray::new(origin, target - origin);
            let step = 0.07;
            let s = march(&g, &ray, step, None).unwrap();
            // independent clip: intersect the six face planes, keep hits on the box
            let mut ts = vec![];
            for a in 0..3 {
                for bound in [-1.0, 1.0] {
                    if ray.direction[a].abs() > 1e-12 {
                        let t = (bound - ray.origin[a]) / ray.direction[a];
                        let p = ray.at(t);
                        if t >= 0.0 && (0..3).all(|b| b == a || p[b].abs() <= 1.0 + 1e-12) {
                            ts.push(t);
                        }
                    }
                }
            }
            if origin.iter().all(|v| v.abs() <= 1.0) {
                ts.push(0.0);
            }
            let t_in = ts.iter().cloned().fold(f64::INFINITY, f64::min);
            let t_out = ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let n = ((t_out - t_in) / step).ceil() as usize;
            assert!(s.len().abs_diff(n) <= 1);
            for (k, smp) in s.samples.iter().enumerate() {
                let expect = ray.at(t_in + k as f64 * step);
                assert!((smp.position - expect).norm() < 1e-6);
            }
            let total: f64 = s.samples.iter().map(|x| x.delta).sum();
            assert!((total - (t_out - t_in)).abs() < 1e-6);
        }
    }

    #[test]
    fn opaque_single_sample() {
        let g = unit_grid(1, 20.0, [1.0, 0.0, 0.0]);
        let ray = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::x());
        let s = march(&g, &ray, 1.0, None).unwrap();
        assert_eq!(s.len(), 1);
        let acc = accumulate(&g, &s).unwrap();
        assert!((acc.color[0] - 1.0).abs() < 1e-8);
        assert_eq!(acc.color[1], 0.0);
        assert!((acc.t_total - (-20.0f64).exp()).abs() < 1e-15);
        assert!(acc.t_total < 2.1e-9);
    }

    #[test]
    fn vacuum_accumulates_nothing() {
        let g = unit_grid(4, 0.0, [1.0; 3]);
        let ray = Ray::new(Vec3::new(-1.0, 0.3, 0.6), Vec3::new(1.0, 0.1, 0.05));
        let s = march(&g, &ray, 0.1, None).unwrap();
        let acc = accumulate(&g, &s).unwrap();
        assert_eq!(acc.color, [0.0; 3]);
        assert_eq!(acc.t_total, 1.0);
    }

    #[test]
    fn non_finite_density_is_reported() {
        let mut g = unit_grid(2, 1.0, [1.0; 3]);
        g.density[3] = f64::NAN;
        let ray = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::x());
        let s = march(&g, &ray, 0.1, None).unwrap();
        assert!(matches!(accumulate(&g, &s), Err(Error::Numeric(_))));
    }

    #[test]
    fn five_samples_match_direct_sum() {
        let g = random_grid(4, 13);
        let ray = Ray::new(Vec3::new(-2.0, 0.1, -0.2), Vec3::new(1.0, 0.05, 0.1));
        let mut s = march(&g, &ray, 0.3, None).unwrap();
        s.samples.truncate(5);
        assert_eq!(s.len(), 5);
        let acc = accumulate(&g, &s).unwrap();
        let mut expect = [0.0; 3];
        for j in 0..5 {
            let sj = g.sample(&s.samples[j].position);
            let mut v = 0.0;
            for k in 0..j {
                v += g.sample(&s.samples[k].position).density * s.samples[k].delta;
            }
            let w = (-v).exp() * (1.0 - (-sj.density * s.samples[j].delta).exp());
            for c in 0..3 {
                expect[c] += w * sj.color[c];
            }
        }
        for c in 0..3 {
            assert!((acc.color[c] - expect[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn monotone_transmittance_and_energy_bound() {
        let g = random_grid(6, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let o = Vec3::new(rng.random_range(-3.0..3.0), -3.0, rng.random_range(-1.0..1.0));
            let ray = Ray::new(o, Vec3::new(rng.random_range(-0.3..0.3), 1.0, 0.0));
            let s = march(&g, &ray, 0.05, None).unwrap();
            let acc = accumulate(&g, &s).unwrap();
            for w in acc.transmittance.windows(2) {
                assert!(w[1] <= w[0]);
            }
            assert!(acc.transmittance.iter().all(|&t| acc.t_total <= t));
            for c in acc.color {
                assert!(c <= 1.0 - acc.t_total + 1e-9);
            }
        }
    }

    #[test]
    fn skip_mask_is_sound_for_zeroed_voxels() {
        let parent = random_grid(4, 16);
        let mask = build_skip_mask(&parent, 1.0);
        let mut child = parent.upsample([8; 3]).unwrap();
        // Zero every child voxel whose stencil can reach a masked parent cell.
        let h = child.voxel_size();
        for i in 0..child.voxel_count() {
            let c = child.center_of(i);
            let near_masked = (0..27).any(|k| {
                let d = Vec3::new(
                    ((k % 3) as f64 - 1.0) * h.x,
                    (((k / 3) % 3) as f64 - 1.0) * h.y,
                    ((k / 9) as f64 - 1.0) * h.z,
                );
                let q = c + d;
                child.bbox().contains(&q) && mask.is_empty_at(&q)
            });
            if near_masked {
                child.density[i] = 0.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let o = Vec3::new(rng.random_range(-2.0..2.0), -3.0, rng.random_range(-2.0..2.0));
            let dir = Vec3::new(rng.random_range(-0.5..0.5), 1.0, rng.random_range(-0.5..0.5));
            let ray = Ray::new(o, dir);
            let a = accumulate(&child, &march(&child, &ray, 0.05, None).unwrap()).unwrap();
            let b = accumulate(&child, &march(&child, &ray, 0.05, Some(&mask)).unwrap()).unwrap();
            for c in 0..3 {
                assert!((a.color[c] - b.color[c]).abs() < 1e-6);
            }
            assert!((a.t_total - b.t_total).abs() < 1e-6);
        }
    }

    #[test]
    fn step_refinement_is_first_order() {
        let mut g = VoxelGrid::new([16; 3], Aabb::centered_cube(1.0), 0.0, [0.0; 3]).unwrap();
        for i in 0..g.voxel_count() {
            let p = g.center_of(i);
            g.density[i] = 1.5 + p.x + 0.5 * p.y * p.y;
            g.color[i] = [0.5 + 0.4 * p.z, 0.5 - 0.3 * p.x, 0.5];
        }
        let ray = Ray::new(Vec3::new(-3.0, 0.2, -0.1), Vec3::new(1.0, 0.1, 0.2));
        let h = |step: f64| accumulate(&g, &march(&g, &ray, step, None).unwrap()).unwrap();
        let base = 0.04;
        let reference = h(base / 16.0);
        for channel in 0..2 {
            let e1 = (h(base).color[channel] - reference.color[channel]).abs();
            let e2 = (h(base / 2.0).color[channel] - reference.color[channel]).abs();
            let ratio = e1 / e2;
            assert!((1.5..=2.5).contains(&ratio), "channel {channel}: ratio {ratio}");
        }
    }

    #[test]
    fn render_vacuum_and_opaque() {
        let view = CameraView {
            name: "v".into(),
            intrinsics: CameraIntrinsics {
                width: 8,
                height: 6,
                fx: 8.0,
                fy: 8.0,
                cx: 4.0,
                cy: 3.0,
            },
            pose: CameraPose::look_at(Vec3::new(0.0, -1.5, 0.0), Vec3::zeros(), Vec3::z())
                .unwrap(),
            reference_image: RgbImage::new(8, 6, [0.0; 3]),
            background_mask: None,
        };
        let bg = [0.2, 0.4, 0.6];
        let vac = VoxelGrid::new([4; 3], Aabb::centered_cube(1.0), 0.0, [1.0; 3]).unwrap();
        let r = render_image(&vac, &view, 0.05, None, bg).unwrap();
        for p in &r.color.data {
            for c in 0..3 {
                assert!((p[c] as f64 - bg[c]).abs() < 1e-6);
            }
        }
        let red = VoxelGrid::new([4; 3], Aabb::centered_cube(1.0), 60.0, [1.0, 0.0, 0.0]).unwrap();
        let r = render_image(&red, &view, 0.05, None, bg).unwrap();
        for (p, t) in r.color.data.iter().zip(&r.transmittance.data) {
            assert!((p[0] - 1.0).abs() < 1e-5 && p[1].abs() < 1e-5);
            assert!(*t < 1e-6);
        }
    }
}
