//! Indexed triangle meshes and ASCII PLY.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    /// Unit normals, one per vertex; may be empty.
    pub normals: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| 0.5 * self.face_normal(f).norm()).sum()
    }

    /// Volume enclosed by a closed, outward-oriented mesh.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn append(&mut self, other: &TriMesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.normals.extend_from_slice(&other.normals);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
    }

    pub fn translated(&self, offset: &Vec3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| v + offset).collect(),
            normals: self.normals.clone(),
            faces: self.faces.clone(),
        }
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let with_normals = self.normals.len() == self.vertices.len() && !self.vertices.is_empty();
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        if with_normals {
            s.push_str("property float nx\nproperty float ny\nproperty float nz\n");
        }
        let _ = writeln!(s, "element face {}", self.faces.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for (i, v) in self.vertices.iter().enumerate() {
            let _ = write!(s, "{} {} {}", v.x, v.y, v.z);
            if with_normals {
                let n = self.normals[i];
                let _ = write!(s, " {} {} {}", n.x, n.y, n.z);
            }
            s.push('\n');
        }
        for f in &self.faces {
            let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Reads the ASCII subset written by [`TriMesh::write_ply`].
    pub fn read_ply(path: &Path) -> Result<TriMesh> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
        let mut lines = text.lines();
        if lines.next() != Some("ply") {
            return Err(bad("not a PLY file"));
        }
        let (mut nv, mut nf, mut props) = (0usize, 0usize, 0usize);
        let mut in_vertex = false;
        for line in lines.by_ref() {
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some("format"), Some(fmt), _) if fmt != "ascii" => return Err(bad("only ASCII PLY is supported")),
                (Some("element"), Some("vertex"), Some(n)) => {
                    nv = n.parse().map_err(|_| bad("bad vertex count"))?;
                    in_vertex = true;
                }
                (Some("element"), Some(_), Some(n)) => {
                    nf = n.parse().map_err(|_| bad("bad face count"))?;
                    in_vertex = false;
                }
                (Some("property"), _, _) if in_vertex => props += 1,
                (Some("end_header"), _, _) => break,
                _ => {}
            }
        }
        let mut mesh = TriMesh::default();
        for _ in 0..nv {
            let vals: Vec<f64> = lines
                .next()
                .ok_or_else(|| bad("truncated vertices"))?
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad("bad vertex")))
                .collect::<Result<_>>()?;
            if vals.len() < 3 {
                return Err(bad("short vertex line"));
            }
            mesh.vertices.push(Vec3::new(vals[0], vals[1], vals[2]));
            if props >= 6 && vals.len() >= 6 {
                mesh.normals.push(Vec3::new(vals[3], vals[4], vals[5]));
            }
        }
        for _ in 0..nf {
            let idx: Vec<u32> = lines
                .next()
                .ok_or_else(|| bad("truncated faces"))?
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|_| bad("bad face")))
                .collect::<Result<_>>()?;
            if idx.first() != Some(&3) || idx.len() != 4 || idx[1..].iter().any(|&i| i as usize >= nv) {
                return Err(bad("only triangles are supported"));
            }
            mesh.faces.push([idx[1], idx[2], idx[3]]);
        }
        Ok(mesh)
    }
}

/// Latitude-longitude sphere with outward faces.
pub fn uv_sphere(center: Vec3, radius: f64, n_lon: usize, n_lat: usize) -> TriMesh {
    let n_lon = n_lon.max(3);
    let n_lat = n_lat.max(2);
    let mut mesh = TriMesh::default();
    let push = |mesh: &mut TriMesh, n: Vec3| {
        mesh.vertices.push(center + radius * n);
        mesh.normals.push(n);
    };
    push(&mut mesh, Vec3::z());
    for i in 1..n_lat {
        let theta = std::f64::consts::PI * i as f64 / n_lat as f64;
        for j in 0..n_lon {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / n_lon as f64;
            push(
                &mut mesh,
                Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()),
            );
        }
    }
    push(&mut mesh, -Vec3::z());
    let ring = |i: usize, j: usize| (1 + (i - 1) * n_lon + j % n_lon) as u32;
    let south = (mesh.vertices.len() - 1) as u32;
    for j in 0..n_lon {
        mesh.faces.push([0, ring(1, j), ring(1, j + 1)]);
        mesh.faces.push([south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)]);
    }
    for i in 1..n_lat - 1 {
        for j in 0..n_lon {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            mesh.faces.push([a, c, d]);
            mesh.faces.push([a, d, b]);
        }
    }
    mesh
}

/// Axis-aligned box, two outward triangles per face.
pub fn box_mesh(min: Vec3, max: Vec3) -> TriMesh {
    let corner = |k: usize| {
        Vec3::new(
            if k & 1 == 1 { max.x } else { min.x },
            if k & 2 == 2 { max.y } else { min.y },
            if k & 4 == 4 { max.z } else { min.z },
        )
    };
    let mut mesh = TriMesh {
        vertices: (0..8).map(corner).collect(),
        normals: Vec::new(),
        faces: Vec::new(),
    };
    // counter-clockwise seen from outside
    let quads = [
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
    ];
    for q in quads {
        mesh.faces.push([q[0], q[1], q[2]]);
        mesh.faces.push([q[0], q[2], q[3]]);
    }
    mesh
}
