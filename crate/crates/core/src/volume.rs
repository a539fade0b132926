//! Dense voxel grid of densities and Lambertian colors.
//!
//! Values live at cell centers; `sample` interpolates trilinearly between
//! the eight surrounding centers and clamps to the edge value within the
//! outer half cell. Points outside the box are vacuum.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::raster::linear_taps;
use crate::snapshot::{read_snapshot, write_snapshot, SnapshotHeader, SNAPSHOT_VERSION};

pub const INITIAL_DENSITY: f64 = 0.1;
pub const INITIAL_COLOR: [f64; 3] = [0.5; 3];

const GRID_MAGIC: [u8; 4] = *b"VXGD";

/// Eight trilinear corners; corner `k` has offsets `(k & 1, (k >> 1) & 1, k >> 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub indices: [u32; 8],
    pub weights: [f64; 8],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSample {
    pub density: f64,
    pub color: [f64; 3],
    /// `None` when the point is outside the grid box.
    pub stencil: Option<Stencil>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    resolution: [usize; 3],
    bbox: Aabb,
    pub density: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl VoxelGrid {
    pub fn new(resolution: [usize; 3], bbox: Aabb, density: f64, color: [f64; 3]) -> Result<Self> {
        if resolution.contains(&0) {
            return Err(Error::Argument(format!("zero grid resolution {resolution:?}")));
        }
        if !bbox.is_valid() {
            return Err(Error::Argument("grid box has non-positive extent".into()));
        }
        let n: usize = resolution.iter().product();
        if n > u32::MAX as usize {
            return Err(Error::Argument("grid too large".into()));
        }
        Ok(Self {
            resolution,
            bbox,
            density: vec![density; n],
            color: vec![color; n],
        })
    }

    /// Grid at the default starting state.
    pub fn initial(resolution: [usize; 3], bbox: Aabb) -> Result<Self> {
        Self::new(resolution, bbox, INITIAL_DENSITY, INITIAL_COLOR)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn voxel_count(&self) -> usize {
        self.density.len()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.resolution;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn voxel_size(&self) -> Vec3 {
        let e = self.bbox.extent();
        Vec3::new(
            e.x / self.resolution[0] as f64,
            e.y / self.resolution[1] as f64,
            e.z / self.resolution[2] as f64,
        )
    }

    /// Shortest voxel edge.
    pub fn voxel_edge(&self) -> f64 {
        self.voxel_size().min()
    }

    pub fn cell_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let s = self.voxel_size();
        let lo = self.bbox.min_v();
        Vec3::new(
            lo.x + (x as f64 + 0.5) * s.x,
            lo.y + (y as f64 + 0.5) * s.y,
            lo.z + (z as f64 + 0.5) * s.z,
        )
    }

    pub fn center_of(&self, idx: usize) -> Vec3 {
        let [x, y, z] = self.coords(idx);
        self.cell_center(x, y, z)
    }

    pub fn stencil(&self, p: &Vec3) -> Option<Stencil> {
        if !self.bbox.contains(p) {
            return None;
        }
        let s = self.voxel_size();
        let mut taps = [(0usize, 0usize, 0.0f64); 3];
        for a in 0..3 {
            taps[a] = linear_taps((p[a] - self.bbox.min[a]) / s[a], self.resolution[a]);
        }
        let mut indices = [0u32; 8];
        let mut weights = [0.0f64; 8];
        for k in 0..8 {
            let mut w = 1.0;
            let mut c = [0usize; 3];
            for a in 0..3 {
                let (i0, i1, f) = taps[a];
                if (k >> a) & 1 == 1 {
                    c[a] = i1;
                    w *= f;
                } else {
                    c[a] = i0;
                    w *= 1.0 - f;
                }
            }
            indices[k] = self.index(c[0], c[1], c[2]) as u32;
            weights[k] = w;
        }
        Some(Stencil { indices, weights })
    }

    pub fn interpolate(&self, stencil: &Stencil) -> (f64, [f64; 3]) {
        let mut density = 0.0;
        let mut color = [0.0; 3];
        for k in 0..8 {
            let i = stencil.indices[k] as usize;
            let w = stencil.weights[k];
            density += w * self.density[i];
            let c = &self.color[i];
            color[0] += w * c[0];
            color[1] += w * c[1];
            color[2] += w * c[2];
        }
        (density, color)
    }

    pub fn interpolate_density(&self, stencil: &Stencil) -> f64 {
        (0..8)
            .map(|k| stencil.weights[k] * self.density[stencil.indices[k] as usize])
            .sum()
    }

    pub fn sample(&self, p: &Vec3) -> GridSample {
        match self.stencil(p) {
            Some(stencil) => {
                let (density, color) = self.interpolate(&stencil);
                GridSample {
                    density,
                    color,
                    stencil: Some(stencil),
                }
            }
            None => GridSample {
                density: 0.0,
                color: [0.0; 3],
                stencil: None,
            },
        }
    }

    /// Resamples onto a finer grid over the same box by trilinear
    /// interpolation at the new cell centers.
    pub fn upsample(&self, new_resolution: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| new_resolution[a] < self.resolution[a]) {
            return Err(Error::Argument(format!(
                "cannot upsample {:?} to smaller {:?}",
                self.resolution, new_resolution
            )));
        }
        if new_resolution == self.resolution {
            return Ok(self.clone());
        }
        let mut out = VoxelGrid::new(new_resolution, self.bbox, 0.0, [0.0; 3])?;
        for idx in 0..out.voxel_count() {
            let s = self.sample(&out.center_of(idx));
            out.density[idx] = s.density;
            out.color[idx] = s.color;
        }
        Ok(out)
    }

    /// Projects onto the feasible set: `σ >= 0`, colors in `[0, 1]`.
    pub fn project_constraints(&mut self) {
        for d in self.density.iter_mut() {
            if *d < 0.0 {
                *d = 0.0;
            }
        }
        for c in self.color.iter_mut() {
            for v in c.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.density.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite density at voxel {i}")));
        }
        if let Some(i) = self
            .color
            .iter()
            .position(|c| c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric(format!("non-finite color at voxel {i}")));
        }
        Ok(())
    }

    /// Moves the box; voxel values are untouched.
    pub fn with_bbox(mut self, bbox: Aabb) -> Self {
        self.bbox = bbox;
        self
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let header = SnapshotHeader {
            magic: GRID_MAGIC,
            version: SNAPSHOT_VERSION,
            dims: self.resolution.map(|n| n as u32),
            extra: [
                self.bbox.min[0] as f32,
                self.bbox.min[1] as f32,
                self.bbox.min[2] as f32,
                self.bbox.max[0] as f32,
                self.bbox.max[1] as f32,
                self.bbox.max[2] as f32,
            ],
        };
        let density: Vec<f32> = self.density.iter().map(|&v| v as f32).collect();
        let channel = |c: usize| -> Vec<f32> { self.color.iter().map(|v| v[c] as f32).collect() };
        let (r, g, b) = (channel(0), channel(1), channel(2));
        write_snapshot(path, &header, &[&density, &r, &g, &b])
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let (header, planes) = read_snapshot(path, GRID_MAGIC, 4)?;
        let e = header.extra;
        let bbox = Aabb {
            min: [e[0] as f64, e[1] as f64, e[2] as f64],
            max: [e[3] as f64, e[4] as f64, e[5] as f64],
        };
        let mut grid = VoxelGrid::new(header.dims.map(|d| d as usize), bbox, 0.0, [0.0; 3])?;
        for i in 0..grid.voxel_count() {
            grid.density[i] = planes[0][i] as f64;
            grid.color[i] = [planes[1][i] as f64, planes[2][i] as f64, planes[3][i] as f64];
        }
        Ok(grid)
    }
}

/// Empty-space mask at the resolution of the previous hierarchy level.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipMask {
    resolution: [usize; 3],
    bbox: Aabb,
    empty: Vec<bool>,
}

impl SkipMask {
    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn flags(&self) -> &[bool] {
        &self.empty
    }

    pub fn empty_fraction(&self) -> f64 {
        self.empty.iter().filter(|&&e| e).count() as f64 / self.empty.len() as f64
    }

    /// True when `p` falls in a masked voxel or outside the box.
    pub fn is_empty_at(&self, p: &Vec3) -> bool {
        if !self.bbox.contains(p) {
            return true;
        }
        let e = self.bbox.extent();
        let mut c = [0usize; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let u = (p[a] - self.bbox.min[a]) / e[a] * n as f64;
            c[a] = (u.floor().max(0.0) as usize).min(n - 1);
        }
        self.empty[c[0] + self.resolution[0] * (c[1] + self.resolution[1] * c[2])]
    }
}

/// Marks every parent voxel with density below `threshold` as empty.
pub fn build_skip_mask(parent: &VoxelGrid, threshold: f64) -> SkipMask {
    SkipMask {
        resolution: parent.resolution,
        bbox: parent.bbox,
        empty: parent.density.iter().map(|&d| d < threshold).collect(),
    }
}
