//! Marching cubes over the density lattice.
//!
//! The triangulation of each of the 256 corner configurations is derived
//! from its faces rather than copied from a table: every cube face
//! contributes the segments between its crossed edges (ambiguous faces keep
//! the inside corners apart), the segments chain into closed polygons, and
//! each polygon is fanned and oriented so its normal points from inside
//! corners to outside ones. Neighboring cubes make the same decision on a
//! shared face, so the surface is closed.
//!
//! Lattice nodes sit at voxel centers, padded with zero-density nodes on
//! the box faces so that density touching the box still closes off.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;

use super::mesh::TriMesh;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::volume::VoxelGrid;

/// Default iso level as optical depth across the shortest side of the
/// scene box. Fitted densities only grow until rays turn opaque, so their
/// scale follows the scene size rather than the voxel size.
pub const DEFAULT_ISO_OPTICAL_DEPTH: f64 = 4.0;

pub fn default_iso(grid: &VoxelGrid) -> f64 {
    let b = grid.bbox();
    let side = (0..3).map(|i| b.max[i] - b.min[i]).fold(f64::INFINITY, f64::min);
    DEFAULT_ISO_OPTICAL_DEPTH / side
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshOptions {
    pub iso: f64,
    /// Treat sub-iso pockets that cannot be reached from outside as solid.
    pub fill_cavities: bool,
}

impl MeshOptions {
    /// Default iso with enclosed pockets filled, so a surface with an
    /// emptied interior yields one outer shell.
    pub fn for_grid(grid: &VoxelGrid) -> Self {
        Self {
            iso: default_iso(grid),
            fill_cavities: true,
        }
    }
}

const EDGES: [(usize, usize); 12] = {
    let mut out = [(0, 0); 12];
    let mut n = 0;
    let mut a = 0;
    while a < 8 {
        let mut bit = 1;
        while bit < 8 {
            if a & bit == 0 {
                out[n] = (a, a | bit);
                n += 1;
            }
            bit <<= 1;
        }
        a += 1;
    }
    out
};

fn corner_offset(k: usize) -> Vec3 {
    Vec3::new((k & 1) as f64, ((k >> 1) & 1) as f64, (k >> 2) as f64)
}

fn edge_index(a: usize, b: usize) -> usize {
    let (a, b) = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == (a, b)).unwrap()
}

/// Cube faces as corner cycles.
fn faces() -> [[usize; 4]; 6] {
    let mut out = [[0; 4]; 6];
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let corner = |du: usize, dv: usize| (side << axis) | (du << u) | (dv << v);
            out[axis * 2 + side] = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
        }
    }
    out
}

/// Polygons of one configuration, each a cycle of cube edge indices.
fn triangulate_case(case: usize) -> Vec<Vec<u8>> {
    let inside = |k: usize| case >> k & 1 == 1;
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for face in faces() {
        let crossed: Vec<usize> = (0..4)
            .filter(|&i| inside(face[i]) != inside(face[(i + 1) % 4]))
            .collect();
        let mut link = |i: usize, j: usize| {
            let a = edge_index(face[i], face[(i + 1) % 4]);
            let b = edge_index(face[j], face[(j + 1) % 4]);
            links[a].push(b);
            links[b].push(a);
        };
        match crossed.len() {
            0 => {}
            2 => link(crossed[0], crossed[1]),
            4 => {
                // each inside corner is cut off by the two face edges meeting at it
                for i in 0..4 {
                    if inside(face[i]) {
                        link((i + 3) % 4, i);
                    }
                }
            }
            _ => unreachable!("a face crosses an even number of edges"),
        }
    }
    let mut used = [false; 12];
    let mut polygons = Vec::new();
    for start in 0..12 {
        if used[start] || links[start].is_empty() {
            continue;
        }
        let mut cycle = vec![start];
        used[start] = true;
        let (mut prev, mut cur) = (start, links[start][0]);
        while cur != start {
            used[cur] = true;
            cycle.push(cur);
            let next = if links[cur][0] == prev { links[cur][1] } else { links[cur][0] };
            prev = cur;
            cur = next;
        }
        // orient from inside corners toward outside ones
        let mid: Vec<Vec3> = cycle
            .iter()
            .map(|&e| 0.5 * (corner_offset(EDGES[e].0) + corner_offset(EDGES[e].1)))
            .collect();
        let mut normal = Vec3::zeros();
        for i in 0..mid.len() {
            normal += mid[i].cross(&mid[(i + 1) % mid.len()]);
        }
        let outward: Vec3 = cycle
            .iter()
            .map(|&e| {
                let (a, b) = EDGES[e];
                let d = corner_offset(b) - corner_offset(a);
                if inside(a) { d } else { -d }
            })
            .sum();
        if normal.dot(&outward) < 0.0 {
            cycle.reverse();
        }
        polygons.push(cycle.into_iter().map(|e| e as u8).collect());
    }
    polygons
}

fn case_table() -> &'static Vec<Vec<Vec<u8>>> {
    static TABLE: OnceLock<Vec<Vec<Vec<u8>>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(triangulate_case).collect())
}

/// Padded node lattice: `n + 2` nodes per axis.
struct Lattice {
    dims: [usize; 3],
    coords: [Vec<f64>; 3],
    values: Vec<f64>,
}

impl Lattice {
    fn new(grid: &VoxelGrid) -> Self {
        let res = grid.resolution();
        let bbox = grid.bbox();
        let size = grid.voxel_size();
        let dims = res.map(|n| n + 2);
        let coords = [0, 1, 2].map(|a| {
            let mut c = Vec::with_capacity(dims[a]);
            c.push(bbox.min[a]);
            for i in 0..res[a] {
                c.push(bbox.min[a] + (i as f64 + 0.5) * size[a]);
            }
            c.push(bbox.max[a]);
            c
        });
        let mut values = vec![0.0; dims.iter().product()];
        for z in 0..res[2] {
            for y in 0..res[1] {
                for x in 0..res[0] {
                    values[(x + 1) + dims[0] * ((y + 1) + dims[1] * (z + 1))] = grid.density[grid.index(x, y, z)];
                }
            }
        }
        Self { dims, coords, values }
    }

    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    fn position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        Vec3::new(self.coords[0][x], self.coords[1][y], self.coords[2][z])
    }

    fn gradient(&self, p: [usize; 3]) -> Vec3 {
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let lo = p[a].saturating_sub(1);
            let hi = (p[a] + 1).min(self.dims[a] - 1);
            let mut pl = p;
            let mut ph = p;
            pl[a] = lo;
            ph[a] = hi;
            let span = self.coords[a][hi] - self.coords[a][lo];
            if span > 0.0 {
                g[a] = (self.values[self.idx(ph[0], ph[1], ph[2])] - self.values[self.idx(pl[0], pl[1], pl[2])]) / span;
            }
        }
        g
    }

    /// Raises unreachable sub-iso nodes above `iso` (6-connected flood fill
    /// from the padding layer).
    fn fill_cavities(&mut self, iso: f64) {
        let n = self.values.len();
        let mut reached = vec![false; n];
        let mut stack = vec![0usize];
        reached[0] = true;
        let [dx, dy, _] = self.dims;
        while let Some(i) = stack.pop() {
            let (x, y, z) = (i % dx, (i / dx) % dy, i / (dx * dy));
            let mut visit = |j: usize| {
                if !reached[j] && self.values[j] < iso {
                    reached[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < dx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - dx);
            }
            if y + 1 < dy {
                visit(i + dx);
            }
            if z > 0 {
                visit(i - dx * dy);
            }
            if z + 1 < self.dims[2] {
                visit(i + dx * dy);
            }
        }
        for i in 0..n {
            if !reached[i] && self.values[i] < iso {
                self.values[i] = iso;
            }
        }
    }
}

/// Extracts the `σ = iso` surface. Empty when nothing crosses the level.
pub fn marching_cubes(grid: &VoxelGrid, opts: &MeshOptions) -> Result<TriMesh> {
    if !(opts.iso > 0.0 && opts.iso.is_finite()) {
        return Err(Error::Argument(format!("iso level must be positive, got {}", opts.iso)));
    }
    let mut lattice = Lattice::new(grid);
    if opts.fill_cavities {
        lattice.fill_cavities(opts.iso);
    }
    let table = case_table();
    let [dx, dy, dz] = lattice.dims;
    let iso = opts.iso;

    // per slab: polygons as lists of global edge keys
    let slabs: Vec<Vec<Vec<u64>>> = (0..dz - 1)
        .into_par_iter()
        .map(|z| {
            let mut polys = Vec::new();
            for y in 0..dy - 1 {
                for x in 0..dx - 1 {
                    let mut case = 0;
                    for k in 0..8 {
                        let v = lattice.values[lattice.idx(x + (k & 1), y + ((k >> 1) & 1), z + (k >> 2))];
                        if v >= iso {
                            case |= 1 << k;
                        }
                    }
                    for poly in &table[case] {
                        polys.push(
                            poly.iter()
                                .map(|&e| {
                                    let (a, b) = EDGES[e as usize];
                                    let axis = (a ^ b).trailing_zeros() as u64;
                                    let node = lattice.idx(x + (a & 1), y + ((a >> 1) & 1), z + (a >> 2));
                                    node as u64 * 3 + axis
                                })
                                .collect(),
                        );
                    }
                }
            }
            polys
        })
        .collect();

    let mut mesh = TriMesh::default();
    let mut vertex_of: HashMap<u64, u32> = HashMap::new();
    let mut vertex = |mesh: &mut TriMesh, key: u64| -> u32 {
        *vertex_of.entry(key).or_insert_with(|| {
            let node = (key / 3) as usize;
            let axis = (key % 3) as usize;
            let p0 = [node % dx, (node / dx) % dy, node / (dx * dy)];
            let mut p1 = p0;
            p1[axis] += 1;
            let v0 = lattice.values[node];
            let v1 = lattice.values[lattice.idx(p1[0], p1[1], p1[2])];
            let t = ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0);
            let a = lattice.position(p0[0], p0[1], p0[2]);
            let b = lattice.position(p1[0], p1[1], p1[2]);
            let g = (1.0 - t) * lattice.gradient(p0) + t * lattice.gradient(p1);
            let n = if g.norm() > 0.0 {
                -g.normalize()
            } else {
                Vec3::zeros()
            };
            mesh.vertices.push(a + t * (b - a));
            mesh.normals.push(n);
            (mesh.vertices.len() - 1) as u32
        })
    };
    for poly in slabs.into_iter().flatten() {
        let ids: Vec<u32> = poly.iter().map(|&k| vertex(&mut mesh, k)).collect();
        for i in 1..ids.len() - 1 {
            let f = [ids[0], ids[i], ids[i + 1]];
            if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] {
                mesh.faces.push(f);
            }
        }
    }
    Ok(mesh)
}
