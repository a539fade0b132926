//! Transient per-voxel environment maps and the weighted Cauchy density
//! penalty they drive.
//!
//! For every voxel, each camera contributes its reference color at the
//! voxel's projection, weighted by the camera-to-voxel visibility, into one
//! bin of an 8×4 equiangular map over the direction toward the camera. The
//! visibility-weighted squared error of that map against the observations
//! becomes the voxel's Cauchy weight `w`: points whose observed colors a
//! low-frequency directional function cannot explain are unlikely to lie on
//! a surface and get their density suppressed. The maps themselves are
//! discarded.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{Ray, Vec3};
use crate::renderer::{check_step, optical_depth};
use crate::scene_io::CameraView;
use crate::snapshot::{write_snapshot, SnapshotHeader, SNAPSHOT_VERSION};
use crate::volume::{SkipMask, VoxelGrid};

pub const PHI_BINS: usize = 8;
pub const THETA_BINS: usize = 4;

/// Cauchy weight used when the prior is disabled.
pub const BASELINE_WEIGHT: f64 = 1e-4;

/// Visibility tracing stops once the optical depth passes this; the
/// remaining transmittance is below 1e-8.
pub const VISIBILITY_DEPTH_LIMIT: f64 = 20.0;

type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EnvBin {
    pub theta: usize,
    pub phi: usize,
}

/// How accumulated bins are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide every bin by the total visibility over all cameras.
    #[default]
    GlobalTsum,
    /// Divide each bin by its own accumulated visibility.
    PerBin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub visibility: f64,
    pub color: Rgb,
    pub bin: EnvBin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniEnvMap {
    pub color: [[Rgb; PHI_BINS]; THETA_BINS],
    pub weight: [[f64; PHI_BINS]; THETA_BINS],
    pub t_sum: f64,
    /// False when no camera sees the voxel (`t_sum == 0`).
    pub valid: bool,
}

impl MiniEnvMap {
    pub fn is_bin_empty(&self, bin: EnvBin) -> bool {
        self.weight[bin.theta][bin.phi] <= 0.0
    }

    pub fn prediction(&self, bin: EnvBin) -> Option<Rgb> {
        (!self.is_bin_empty(bin)).then(|| self.color[bin.theta][bin.phi])
    }
}

/// Bilinear fetch of the reference color under the voxel center; `None`
/// when the point is behind the camera or projects off screen.
pub fn project_voxel(center: &Vec3, view: &CameraView) -> Option<Rgb> {
    let (u, v, _) = view.project(center)?;
    if u < 0.0 || v < 0.0 || u >= view.width() as f64 || v >= view.height() as f64 {
        return None;
    }
    Some(view.reference_image.bilinear(u, v))
}

/// Half the longest voxel edge: the band in front of the target voxel that
/// visibility queries leave out.
pub fn guard_band(grid: &VoxelGrid) -> f64 {
    0.5 * grid.voxel_size().max()
}

/// Throughput from the camera center to the voxel center.
pub fn trace_visibility(
    center: &Vec3,
    view: &CameraView,
    grid: &VoxelGrid,
    step: f64,
    skip: Option<&SkipMask>,
) -> Result<f64> {
    check_step(step)?;
    let eye = view.pose.center();
    let to_voxel = center - eye;
    let dist = to_voxel.norm();
    let t_max = dist - guard_band(grid);
    if dist < 1e-12 || t_max <= 0.0 {
        return Ok(1.0);
    }
    let ray = Ray::new(eye, to_voxel);
    let depth = optical_depth(grid, &ray, t_max, step, skip, VISIBILITY_DEPTH_LIMIT)?;
    Ok((-depth).exp())
}

/// Equiangular bin of the direction from the voxel toward the camera,
/// `θ = acos(d_z)` over `[0, π]` and `φ = atan2(d_y, d_x)` over `[-π, π)`.
pub fn map_spherical(center: &Vec3, view: &CameraView) -> Option<EnvBin> {
    let d = view.pose.center() - center;
    let len = d.norm();
    if len < 1e-12 {
        return None;
    }
    let d = d / len;
    let theta = d.z.clamp(-1.0, 1.0).acos();
    let theta_bin = ((theta / (PI / THETA_BINS as f64)).floor() as usize).min(THETA_BINS - 1);
    let phi_bin = if d.x.hypot(d.y) < 1e-12 {
        0
    } else {
        let phi = d.y.atan2(d.x);
        ((((phi + PI) / (2.0 * PI / PHI_BINS as f64)).floor() as isize).rem_euclid(PHI_BINS as isize))
            as usize
    };
    Some(EnvBin {
        theta: theta_bin,
        phi: phi_bin,
    })
}

/// One observation per camera that sees the voxel on screen.
pub fn observe(
    center: &Vec3,
    views: &[CameraView],
    grid: &VoxelGrid,
    step: f64,
    skip: Option<&SkipMask>,
) -> Result<Vec<Observation>> {
    let mut out = Vec::with_capacity(views.len());
    for view in views {
        let Some(color) = project_voxel(center, view) else {
            continue;
        };
        let Some(bin) = map_spherical(center, view) else {
            continue;
        };
        let visibility = trace_visibility(center, view, grid, step, skip)?;
        out.push(Observation {
            visibility,
            color,
            bin,
        });
    }
    Ok(out)
}

fn canonical_order(a: &Observation, b: &Observation) -> Ordering {
    a.bin
        .cmp(&b.bin)
        .then(a.visibility.total_cmp(&b.visibility))
        .then(a.color[0].total_cmp(&b.color[0]))
        .then(a.color[1].total_cmp(&b.color[1]))
        .then(a.color[2].total_cmp(&b.color[2]))
}

/// Accumulates and normalizes the map. Observations are summed in a
/// canonical order so any camera permutation gives the same bits.
pub fn populate_from(observations: &[Observation], mode: Normalization) -> MiniEnvMap {
    let mut sorted = observations.to_vec();
    sorted.sort_by(canonical_order);
    let mut env = MiniEnvMap {
        color: [[[0.0; 3]; PHI_BINS]; THETA_BINS],
        weight: [[0.0; PHI_BINS]; THETA_BINS],
        t_sum: 0.0,
        valid: false,
    };
    for o in &sorted {
        let cell = &mut env.color[o.bin.theta][o.bin.phi];
        for c in 0..3 {
            cell[c] += o.visibility * o.color[c];
        }
        env.weight[o.bin.theta][o.bin.phi] += o.visibility;
        env.t_sum += o.visibility;
    }
    env.valid = env.t_sum > 0.0;
    if !env.valid {
        return env;
    }
    for th in 0..THETA_BINS {
        for ph in 0..PHI_BINS {
            let norm = match mode {
                Normalization::GlobalTsum => env.t_sum,
                Normalization::PerBin => env.weight[th][ph],
            };
            if env.weight[th][ph] > 0.0 {
                for c in 0..3 {
                    env.color[th][ph][c] /= norm;
                }
            }
        }
    }
    env
}

pub fn populate(
    center: &Vec3,
    views: &[CameraView],
    grid: &VoxelGrid,
    step: f64,
    skip: Option<&SkipMask>,
    mode: Normalization,
) -> Result<(MiniEnvMap, Vec<Observation>)> {
    let obs = observe(center, views, grid, step, skip)?;
    let env = populate_from(&obs, mode);
    Ok((env, obs))
}

/// Visibility-weighted mean squared prediction error over cameras and
/// channels; `None` when the observations carry no visibility.
pub fn fit_error(env: &MiniEnvMap, observations: &[Observation]) -> Option<f64> {
    let mut sorted = observations.to_vec();
    sorted.sort_by(canonical_order);
    let t_sum: f64 = sorted.iter().map(|o| o.visibility).sum();
    if t_sum <= 0.0 {
        return None;
    }
    let mut acc = 0.0;
    for o in &sorted {
        let p = env.color[o.bin.theta][o.bin.phi];
        let sq: f64 = (0..3).map(|c| (o.color[c] - p[c]).powi(2)).sum();
        acc += o.visibility * sq;
    }
    Some(acc / t_sum)
}

/// Per-voxel Cauchy weights, one per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvPriorBuffer {
    pub resolution: [usize; 3],
    pub weights: Vec<f64>,
}

impl EnvPriorBuffer {
    pub fn constant(resolution: [usize; 3], w: f64) -> Self {
        Self {
            resolution,
            weights: vec![w; resolution.iter().product()],
        }
    }

    /// Raw float volume for inspection, snapshot layout with magic `EPWB`.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let header = SnapshotHeader {
            magic: *b"EPWB",
            version: SNAPSHOT_VERSION,
            dims: self.resolution.map(|n| n as u32),
            extra: [0.0; 6],
        };
        let data: Vec<f32> = self.weights.iter().map(|&w| w as f32).collect();
        write_snapshot(path, &header, &[&data])
    }
}

/// `w = E` for valid voxels; invalid voxels take the largest valid error of
/// the pass (zero if none is valid).
pub fn weight_from_error(resolution: [usize; 3], errors: &[Option<f64>]) -> EnvPriorBuffer {
    let w_max = errors.iter().flatten().cloned().fold(0.0, f64::max);
    EnvPriorBuffer {
        resolution,
        weights: errors.iter().map(|e| e.unwrap_or(w_max)).collect(),
    }
}

/// Full prior pass over the grid. Voxels under the skip mask are treated as
/// empty and receive the invalid weight.
pub fn compute_env_prior(
    grid: &VoxelGrid,
    views: &[CameraView],
    step: f64,
    skip: Option<&SkipMask>,
    mode: Normalization,
) -> Result<EnvPriorBuffer> {
    check_step(step)?;
    let errors: Vec<Option<f64>> = (0..grid.voxel_count())
        .into_par_iter()
        .map(|idx| {
            let center = grid.center_of(idx);
            if skip.is_some_and(|m| m.is_empty_at(&center)) {
                return Ok(None);
            }
            let (env, obs) = populate(&center, views, grid, step, skip, mode)?;
            Ok(if env.valid { fit_error(&env, &obs) } else { None })
        })
        .collect::<Result<_>>()?;
    Ok(weight_from_error(grid.resolution(), &errors))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CauchyParams {
    /// `λ_c`: overall loss scale.
    pub scale: f64,
    /// `λ_n`: how strongly the per-voxel weight enters.
    pub weight_scale: f64,
    /// Penalize optical depth per voxel edge `σ·edge` instead of `σ`.
    #[serde(default)]
    pub per_voxel: bool,
}

impl CauchyParams {
    pub const SYNTHETIC: Self = Self {
        scale: 0.05,
        weight_scale: 10.0,
        per_voxel: true,
    };
    pub const REAL: Self = Self {
        scale: 0.01,
        weight_scale: 10.0,
        per_voxel: true,
    };
}

/// `L_c = λ_c Σ_i ln(1 + λ_n w_i s_i²)` with `s_i = σ_i · unit`; adds
/// `∂L_c/∂σ_i` into `grad`.
pub fn cauchy_loss_into(density: &[f64], weights: &[f64], params: &CauchyParams, unit: f64, grad: &mut [f64]) -> f64 {
    assert_eq!(density.len(), weights.len());
    assert_eq!(density.len(), grad.len());
    let mut loss = 0.0;
    for i in 0..density.len() {
        let s = density[i] * unit;
        let k = params.weight_scale * weights[i];
        let q = k * s * s;
        loss += q.ln_1p();
        grad[i] += params.scale * 2.0 * k * s * unit / (1.0 + q);
    }
    params.scale * loss
}

pub fn cauchy_loss(density: &[f64], weights: &[f64], params: &CauchyParams, unit: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; density.len()];
    let loss = cauchy_loss_into(density, weights, params, unit, &mut grad);
    (loss, grad)
}

impl CauchyParams {
    /// Length that turns a density into the penalized quantity.
    pub fn unit(&self, grid: &VoxelGrid) -> f64 {
        if self.per_voxel {
            grid.voxel_edge()
        } else {
            1.0
        }
    }
}
