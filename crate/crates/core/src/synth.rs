//! Analytic test scenes: spheres and boxes with Lambertian plus Phong
//! shading, seen by a ring of cameras.
//!
//! Images are ray traced in closed form (no shadows or interreflection) and
//! box-filtered over `supersample²` sub-pixel rays. The generated datasets
//! carry their own ground truth: per-view depth and the exact surface mesh.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb as PixelRgb, Rgba};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::{box_mesh, uv_sphere, TriMesh};
use crate::geometry::{Aabb, Ray, Vec3};
use crate::raster::{linear_to_srgb, GrayImage, RgbImage};
use crate::scene_io::{pose_to_rows, CameraIntrinsics, CameraPose, CameraView, Dataset, Manifest, ManifestFrame, SceneKind};

type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Specular {
    pub shininess: f64,
    pub strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: Rgb,
    pub specular: Option<Specular>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    /// Elevation above the xy plane, radians.
    pub elevation: f64,
    /// Horizontal field of view, radians.
    pub fov_x: f64,
    /// Extra held-out cameras placed halfway between ring cameras.
    pub test_count: usize,
    /// Elevation of the held-out ring.
    pub test_elevation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub primitives: Vec<Primitive>,
    /// Unit vector toward the light.
    pub light: [f64; 3],
    /// Constant term added to `n·l` so unlit sides are not black.
    pub ambient: f64,
    pub ring: CameraRing,
    pub bbox: Aabb,
    pub background: Rgb,
    pub supersample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub primitive: usize,
}

fn intersect_sphere(ray: &Ray, center: &Vec3, radius: f64) -> Option<(f64, Vec3)> {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = if -b - sq > 1e-9 { -b - sq } else { -b + sq };
    if t <= 1e-9 {
        return None;
    }
    Some((t, (ray.at(t) - center) / radius))
}

fn intersect_box(ray: &Ray, min: &Vec3, max: &Vec3) -> Option<(f64, Vec3)> {
    let (t0, t1) = Ray::new(ray.origin, ray.direction).clip(&Aabb::new(*min, *max))?;
    let t = if t0 > 1e-9 { t0 } else { t1 };
    if t <= 1e-9 {
        return None;
    }
    let p = ray.at(t);
    let c = 0.5 * (min + max);
    let half = 0.5 * (max - min);
    let q = (p - c).component_div(&half);
    let axis = q.iamax();
    let mut n = Vec3::zeros();
    n[axis] = q[axis].signum();
    Some((t, n))
}

impl SynthScene {
    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::Argument("scene box is degenerate".into()));
        }
        for p in &self.primitives {
            let (lo, hi) = match p.shape {
                Shape::Sphere { center, radius } => {
                    let c = Vec3::from(center);
                    (c - Vec3::repeat(radius), c + Vec3::repeat(radius))
                }
                Shape::Box { min, max } => (Vec3::from(min), Vec3::from(max)),
            };
            if !self.bbox.contains(&lo) || !self.bbox.contains(&hi) {
                return Err(Error::Argument(format!("primitive {:?} leaves the scene box", p.shape)));
            }
        }
        if self.ring.count < 2 || self.supersample < 1 {
            return Err(Error::Argument("need at least 2 cameras and supersample >= 1".into()));
        }
        Ok(())
    }

    pub fn light_dir(&self) -> Vec3 {
        Vec3::from(self.light).normalize()
    }

    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            let hit = match p.shape {
                Shape::Sphere { center, radius } => intersect_sphere(ray, &Vec3::from(center), radius),
                Shape::Box { min, max } => intersect_box(ray, &Vec3::from(min), &Vec3::from(max)),
            };
            if let Some((t, normal)) = hit {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: ray.at(t),
                        normal,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    /// Lambertian part `albedo (ambient + max(0, n·l))`.
    pub fn diffuse(&self, hit: &Hit) -> Rgb {
        let p = &self.primitives[hit.primitive];
        let k = self.ambient + hit.normal.dot(&self.light_dir()).max(0.0);
        p.albedo.map(|a| a * k)
    }

    /// Phong term `strength max(0, r·v)^shininess`, zero on unlit sides.
    pub fn specular(&self, hit: &Hit, to_viewer: &Vec3) -> f64 {
        let Some(s) = self.primitives[hit.primitive].specular else {
            return 0.0;
        };
        let l = self.light_dir();
        let nl = hit.normal.dot(&l);
        if nl <= 0.0 {
            return 0.0;
        }
        let r = 2.0 * nl * hit.normal - l;
        s.strength * r.dot(to_viewer).max(0.0).powf(s.shininess)
    }

    /// Radiance along a ray, `None` on a miss.
    pub fn shade(&self, ray: &Ray) -> Option<Rgb> {
        let hit = self.intersect(ray)?;
        let d = self.diffuse(&hit);
        let s = self.specular(&hit, &(-ray.direction));
        Some(d.map(|c| (c + s).clamp(0.0, 1.0)))
    }

    fn ring_view(&self, name: String, azimuth: f64, elevation: f64, width: usize, height: usize) -> Result<CameraView> {
        let r = self.ring.radius;
        let eye = Vec3::new(
            r * elevation.cos() * azimuth.cos(),
            r * elevation.cos() * azimuth.sin(),
            r * elevation.sin(),
        ) + self.bbox.center();
        let pose = CameraPose::look_at(eye, self.bbox.center(), Vec3::z())?;
        Ok(CameraView {
            name,
            intrinsics: CameraIntrinsics::from_fov_x(width, height, self.ring.fov_x),
            pose,
            reference_image: RgbImage::new(width, height, [0.0; 3]),
            background_mask: None,
        })
    }

    pub fn cameras(&self, width: usize, height: usize) -> Result<(Vec<CameraView>, Vec<CameraView>)> {
        let n = self.ring.count;
        let step = 2.0 * std::f64::consts::PI / n as f64;
        let train = (0..n)
            .map(|i| self.ring_view(format!("train/r_{i}"), i as f64 * step, self.ring.elevation, width, height))
            .collect::<Result<_>>()?;
        let m = self.ring.test_count;
        let test = (0..m)
            .map(|i| {
                let az = (i as f64 * n as f64 / m.max(1) as f64 + 0.5).floor() * step + 0.5 * step;
                self.ring_view(format!("test/r_{i}"), az, self.ring.test_elevation, width, height)
            })
            .collect::<Result<_>>()?;
        Ok((train, test))
    }

    /// Box-filtered radiance, coverage and center-ray depth for one view.
    pub fn render(&self, view: &CameraView) -> SynthImage {
        let (w, h) = (view.width(), view.height());
        let s = self.supersample;
        let rows: Vec<Vec<(Rgb, f64, f64)>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let mut sum = [0.0; 3];
                        let mut hits = 0usize;
                        for sy in 0..s {
                            for sx in 0..s {
                                let u = x as f64 + (sx as f64 + 0.5) / s as f64;
                                let v = y as f64 + (sy as f64 + 0.5) / s as f64;
                                if let Some(c) = self.shade(&view.ray_through(u, v)) {
                                    hits += 1;
                                    for k in 0..3 {
                                        sum[k] += c[k];
                                    }
                                }
                            }
                        }
                        let coverage = hits as f64 / (s * s) as f64;
                        let color = if hits > 0 { sum.map(|c| c / hits as f64) } else { [0.0; 3] };
                        let center = view.ray_through(x as f64 + 0.5, y as f64 + 0.5);
                        let depth = self
                            .intersect(&center)
                            .map(|hit| view.project(&hit.point).map_or(0.0, |p| p.2))
                            .unwrap_or(0.0);
                        (color, coverage, depth)
                    })
                    .collect()
            })
            .collect();
        let mut out = SynthImage {
            color: vec![[0.0; 3]; w * h],
            coverage: GrayImage::new(w, h, 0.0),
            depth: GrayImage::new(w, h, 0.0),
            width: w,
            height: h,
        };
        for (y, row) in rows.into_iter().enumerate() {
            for (x, (c, a, d)) in row.into_iter().enumerate() {
                out.color[y * w + x] = c;
                out.coverage.data[y * w + x] = a as f32;
                out.depth.data[y * w + x] = d as f32;
            }
        }
        out
    }

    /// Pixels whose center ray sees a specular term above `threshold`.
    pub fn highlight_footprint(&self, view: &CameraView, threshold: f64) -> Vec<bool> {
        let (w, h) = (view.width(), view.height());
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let s = self.supersample;
                'sub: for sy in 0..s {
                    for sx in 0..s {
                        let u = x as f64 + (sx as f64 + 0.5) / s as f64;
                        let v = y as f64 + (sy as f64 + 0.5) / s as f64;
                        let ray = view.ray_through(u, v);
                        if let Some(hit) = self.intersect(&ray) {
                            if self.specular(&hit, &(-ray.direction)) > threshold {
                                mask[y * w + x] = true;
                                break 'sub;
                            }
                        }
                    }
                }
            }
        }
        mask
    }

    /// Exact surface as triangles.
    pub fn surface_mesh(&self) -> TriMesh {
        let mut mesh = TriMesh::default();
        for p in &self.primitives {
            let m = match p.shape {
                Shape::Sphere { center, radius } => uv_sphere(Vec3::from(center), radius, 128, 64),
                Shape::Box { min, max } => box_mesh(Vec3::from(min), Vec3::from(max)),
            };
            mesh.append(&m);
        }
        if mesh.normals.len() != mesh.vertices.len() {
            mesh.normals.clear();
        }
        mesh
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub width: usize,
    pub height: usize,
    /// Mean radiance of the sub-pixel rays that hit something.
    pub color: Vec<Rgb>,
    pub coverage: GrayImage,
    /// Optical-axis depth of the center ray, 0 on a miss.
    pub depth: GrayImage,
}

impl SynthImage {
    pub fn composited(&self, background: &Rgb) -> RgbImage {
        let mut img = RgbImage::new(self.width, self.height, [0.0; 3]);
        for i in 0..self.color.len() {
            let a = self.coverage.data[i] as f64;
            img.data[i] = [0, 1, 2].map(|c| (self.color[i][c] * a + background[c] * (1.0 - a)) as f32);
        }
        img
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub scene: SynthScene,
    pub train: Dataset,
    pub test: Dataset,
    pub train_images: Vec<SynthImage>,
    pub test_images: Vec<SynthImage>,
    pub mesh: TriMesh,
}

/// Renders every train and test camera at `width × height`.
pub fn generate(scene: &SynthScene, width: usize, height: usize) -> Result<SynthData> {
    scene.validate()?;
    let (mut train_views, mut test_views) = scene.cameras(width, height)?;
    let render_all = |views: &mut Vec<CameraView>| -> Vec<SynthImage> {
        views
            .iter_mut()
            .map(|v| {
                let img = scene.render(v);
                v.reference_image = img.composited(&scene.background);
                v.background_mask = Some(img.coverage.clone());
                img
            })
            .collect()
    };
    let train_images = render_all(&mut train_views);
    let test_images = render_all(&mut test_views);
    let dataset = |views| Dataset {
        views,
        scene_bbox: scene.bbox,
        scene_kind: SceneKind::Synthetic,
        background: scene.background,
    };
    Ok(SynthData {
        scene: scene.clone(),
        train: dataset(train_views),
        test: dataset(test_views),
        train_images,
        test_images,
        mesh: scene.surface_mesh(),
    })
}

fn write_rgba16(path: &Path, img: &SynthImage) -> Result<()> {
    let buf = ImageBuffer::<Rgba<u16>, Vec<u16>>::from_fn(img.width as u32, img.height as u32, |x, y| {
        let i = y as usize * img.width + x as usize;
        let c = img.color[i].map(|v| (linear_to_srgb(v) * 65535.0).round() as u16);
        let a = (img.coverage.data[i] as f64 * 65535.0).round() as u16;
        Rgba([c[0], c[1], c[2], a])
    });
    buf.save(path)?;
    Ok(())
}

fn write_depth_exr(path: &Path, depth: &GrayImage) -> Result<()> {
    let buf = ImageBuffer::<PixelRgb<f32>, Vec<f32>>::from_fn(depth.width as u32, depth.height as u32, |x, y| {
        let d = depth.get(x as usize, y as usize);
        PixelRgb([d, d, d])
    });
    buf.save(path)?;
    Ok(())
}

impl SynthData {
    /// Writes `transforms_{train,test}.json`, 16-bit RGBA PNGs, per-view
    /// depth as `gt_depth/<split>_<i>.exr`, `gt_mesh.ply` and `scene.json`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for dir in ["train", "test", "gt_depth"] {
            let d = root.join(dir);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let b = self.scene.bbox;
        for (split, data, images) in [
            ("train", &self.train, &self.train_images),
            ("test", &self.test, &self.test_images),
        ] {
            let mut frames = Vec::with_capacity(data.views.len());
            for (i, (view, img)) in data.views.iter().zip(images).enumerate() {
                write_rgba16(&root.join(format!("{split}/r_{i}.png")), img)?;
                write_depth_exr(&root.join(format!("gt_depth/{split}_{i}.exr")), &img.depth)?;
                frames.push(ManifestFrame {
                    file_path: format!("./{split}/r_{i}"),
                    transform_matrix: pose_to_rows(&view.pose),
                });
            }
            let (w, h) = data.views.first().map_or((0, 0), |v| (v.width(), v.height()));
            Manifest {
                camera_angle_x: self.scene.ring.fov_x,
                w: Some(w),
                h: Some(h),
                aabb: Some([b.min, b.max]),
                scene_kind: Some(SceneKind::Synthetic),
                frames,
            }
            .write(&root.join(format!("transforms_{split}.json")))?;
        }
        self.mesh.write_ply(&root.join("gt_mesh.ply"))?;
        let text = serde_json::to_string_pretty(&self.scene)?;
        let p = root.join("scene.json");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

fn default_ring() -> CameraRing {
    CameraRing {
        count: 24,
        radius: 4.0,
        elevation: 25f64.to_radians(),
        fov_x: 0.6,
        test_count: 4,
        test_elevation: 40f64.to_radians(),
    }
}

/// Glossy sphere whose highlight moves across the training views.
pub fn ambiguity_case() -> SynthScene {
    SynthScene {
        primitives: vec![Primitive {
            shape: Shape::Sphere {
                center: [0.0; 3],
                radius: 0.6,
            },
            albedo: [0.55, 0.3, 0.2],
            specular: Some(Specular {
                shininess: 20.0,
                strength: 0.8,
            }),
        }],
        light: [0.4, -0.3, 0.87],
        ambient: 0.25,
        ring: default_ring(),
        bbox: Aabb::centered_cube(1.0),
        background: [1.0; 3],
        supersample: 3,
    }
}

/// The same sphere without the specular lobe.
pub fn diffuse_sphere() -> SynthScene {
    let mut s = ambiguity_case();
    s.primitives[0].specular = None;
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{load_dataset, load_dataset_with, LoadOptions, Split};

    fn small(mut s: SynthScene) -> SynthScene {
        s.ring.count = 6;
        s.ring.test_count = 2;
        s
    }

    #[test]
    fn matches_closed_form_sphere() {
        let mut scene = ambiguity_case();
        scene.supersample = 1;
        let (views, _) = scene.cameras(32, 32).unwrap();
        let l = scene.light_dir();
        for view in views.iter().take(4) {
            let img = scene.render(view);
            for y in 0..32 {
                for x in 0..32 {
                    let ray = view.ray_through(x as f64 + 0.5, y as f64 + 0.5);
                    // |o + t d|² = R² solved directly
                    let (o, d) = (ray.origin, ray.direction);
                    let b = o.dot(&d);
                    let disc = b * b - (o.dot(&o) - 0.36);
                    let i = y * 32 + x;
                    if disc < 0.0 {
                        assert_eq!(img.coverage.data[i], 0.0);
                        continue;
                    }
                    let t = -b - disc.sqrt();
                    let n = (o + t * d) / 0.6;
                    let nl = n.dot(&l);
                    let r = 2.0 * nl * n - l;
                    let spec = if nl > 0.0 { 0.8 * r.dot(&-d).max(0.0).powf(20.0) } else { 0.0 };
                    for c in 0..3 {
                        let a = [0.55, 0.3, 0.2][c];
                        let expect = (a * (0.25 + nl.max(0.0)) + spec).clamp(0.0, 1.0);
                        assert!((img.color[i][c] - expect).abs() < 1e-6);
                    }
                    assert_eq!(img.coverage.data[i], 1.0);
                }
            }
        }
    }

    #[test]
    fn diffuse_color_is_view_independent() {
        let scene = diffuse_sphere();
        let hit_from = |eye: Vec3| {
            let p = Vec3::new(0.0, 0.0, 0.6);
            let ray = Ray::new(eye, p - eye);
            let hit = scene.intersect(&ray).unwrap();
            assert!((hit.point - p).norm() < 1e-9);
            scene.shade(&ray).unwrap()
        };
        let a = hit_from(Vec3::new(0.0, 0.0, 3.0));
        let b = hit_from(Vec3::new(1.0, 0.5, 3.0));
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn highlight_shrinks_with_shininess() {
        let mut scene = ambiguity_case();
        scene.supersample = 1;
        let (views, _) = scene.cameras(48, 48).unwrap();
        let mut last = usize::MAX;
        for shininess in [5.0, 20.0, 80.0, 320.0] {
            scene.primitives[0].specular = Some(Specular {
                shininess,
                strength: 0.8,
            });
            let area = scene.highlight_footprint(&views[2], 0.05).iter().filter(|&&m| m).count();
            assert!(area <= last);
            last = area;
        }
    }

    #[test]
    fn box_normals_and_depth() {
        let mut scene = diffuse_sphere();
        scene.primitives = vec![Primitive {
            shape: Shape::Box {
                min: [-0.5; 3],
                max: [0.5; 3],
            },
            albedo: [1.0; 3],
            specular: None,
        }];
        let ray = Ray::new(Vec3::new(0.1, -3.0, 0.2), Vec3::y());
        let hit = scene.intersect(&ray).unwrap();
        assert!((hit.t - 2.5).abs() < 1e-12);
        assert_eq!(hit.normal, -Vec3::y());
        assert!(scene.intersect(&Ray::new(Vec3::new(3.0, -3.0, 0.0), Vec3::y())).is_none());
    }

    #[test]
    fn generate_is_deterministic_and_round_trips() {
        let scene = small(ambiguity_case());
        let a = generate(&scene, 24, 24).unwrap();
        let b = generate(&scene, 24, 24).unwrap();
        assert_eq!(a.train_images, b.train_images);

        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let loaded = load_dataset(dir.path(), 1).unwrap();
        assert_eq!(loaded.views.len(), 6);
        assert_eq!(loaded.scene_bbox, scene.bbox);
        for (l, g) in loaded.views.iter().zip(&a.train.views) {
            let (m1, m2) = (l.pose.matrix(), g.pose.matrix());
            assert!((m1 - m2).amax() < 1e-9);
            assert!((l.intrinsics.fx - g.intrinsics.fx).abs() < 1e-9);
            for (p, q) in l.reference_image.data.iter().zip(&g.reference_image.data) {
                for c in 0..3 {
                    assert!((p[c] - q[c]).abs() < 2e-4);
                }
            }
        }
        let test = load_dataset_with(dir.path(), &LoadOptions { split: Split::Test, ..Default::default() }).unwrap();
        assert_eq!(test.views.len(), 2);
        let mesh = TriMesh::read_ply(&dir.path().join("gt_mesh.ply")).unwrap();
        assert_eq!(mesh.faces.len(), a.mesh.faces.len());
        let depth = image::open(dir.path().join("gt_depth/train_0.exr")).unwrap().to_rgb32f();
        let center = depth.get_pixel(12, 12)[0];
        assert!((center as f64 - (4.0 - 0.6)).abs() < 0.05, "{center}");
    }

    #[test]
    fn invalid_scenes_are_rejected() {
        let mut s = diffuse_sphere();
        s.primitives[0].shape = Shape::Sphere {
            center: [0.8, 0.0, 0.0],
            radius: 0.5,
        };
        assert!(s.validate().is_err());
    }
}
