//! Posed-image datasets in the NeRF-synthetic `transforms_*.json` layout,
//! and per-pixel camera rays.
//!
//! Cameras follow the OpenGL convention: the camera looks down its local
//! `-z` axis, `+y` is up and `+x` is right. Pixel `(px, py)` has its center
//! at `(px + 0.5, py + 0.5)`, rows grow downward.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Ray, Vec3};
use crate::raster::{srgb_to_linear, GrayImage, RgbImage};

/// Default half extent of the scene box when a manifest does not carry one.
pub const DEFAULT_BBOX_HALF_EXTENT: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Pinhole intrinsics from a horizontal field of view, principal point at
    /// the image center.
    pub fn from_fov_x(width: usize, height: usize, camera_angle_x: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * camera_angle_x).tan();
        Self {
            width,
            height,
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.width >= 1
            && self.height >= 1
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Intrinsics of the image box-filtered by `factor`.
    pub fn downscaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            width: self.width / factor,
            height: self.height / factor,
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    world_from_camera: Matrix4<f64>,
}

impl CameraPose {
    pub fn new(world_from_camera: Matrix4<f64>) -> Result<Self> {
        let m = world_from_camera;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Pose("non-finite entries".into()));
        }
        let last = m.row(3);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > 1e-9 {
            return Err(Error::Pose(format!("last row must be (0,0,0,1), got {last}")));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::Pose(format!(
                "rotation block not orthonormal (max deviation {err:.3e})"
            )));
        }
        if r.determinant() <= 0.0 {
            return Err(Error::Pose("rotation block has negative determinant".into()));
        }
        Ok(Self {
            world_from_camera: m,
        })
    }

    pub fn identity() -> Self {
        Self {
            world_from_camera: Matrix4::identity(),
        }
    }

    /// Camera at `eye` looking at `target`, with `up` as the approximate
    /// world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let back = (eye - target).normalize();
        let right = up.cross(&back);
        if right.norm() < 1e-12 {
            return Err(Error::Pose("up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let true_up = back.cross(&right);
        let mut m = Matrix4::identity();
        for i in 0..3 {
            m[(i, 0)] = right[i];
            m[(i, 1)] = true_up[i];
            m[(i, 2)] = back[i];
            m[(i, 3)] = eye[i];
        }
        Self::new(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.world_from_camera
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_from_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            self.world_from_camera[(0, 3)],
            self.world_from_camera[(1, 3)],
            self.world_from_camera[(2, 3)],
        )
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation().transpose() * (world - self.center())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    /// Linear-space reference colors, composited over the dataset background.
    pub reference_image: RgbImage,
    pub background_mask: Option<GrayImage>,
}

impl CameraView {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// World-space ray through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: f64, py: f64) -> Result<Ray> {
        let k = &self.intrinsics;
        if !(px >= 0.0 && px < k.width as f64 && py >= 0.0 && py < k.height as f64) {
            return Err(Error::Bounds {
                px,
                py,
                width: k.width,
                height: k.height,
            });
        }
        Ok(self.ray_through(px + 0.5, py + 0.5))
    }

    /// Ray through continuous image coordinates `(u, v)`; no bounds check.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let local = Vec3::new((u - k.cx) / k.fx, -(v - k.cy) / k.fy, -1.0);
        Ray::new(self.pose.center(), self.pose.rotation() * local)
    }

    /// Projects a world point to continuous image coordinates. Returns
    /// `(u, v, depth)` with `depth` measured along the optical axis, or `None`
    /// for points at or behind the camera plane.
    pub fn project(&self, world: &Vec3) -> Option<(f64, f64, f64)> {
        let p = self.pose.to_camera(world);
        let depth = -p.z;
        if depth <= 1e-12 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.cx + k.fx * p.x / depth, k.cy - k.fy * p.y / depth, depth))
    }

    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        Ok(Self {
            name: self.name.clone(),
            intrinsics: self.intrinsics.downscaled(factor),
            pose: self.pose,
            reference_image: self.reference_image.box_downsample(factor)?,
            background_mask: self
                .background_mask
                .as_ref()
                .map(|m| m.box_downsample(factor))
                .transpose()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    #[default]
    Synthetic,
    Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub views: Vec<CameraView>,
    pub scene_bbox: Aabb,
    pub scene_kind: SceneKind,
    /// Constant color behind the scene box, linear RGB.
    pub background: [f64; 3],
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.views.len() < 2 {
            return Err(Error::Inconsistent(format!(
                "need at least 2 views, got {}",
                self.views.len()
            )));
        }
        if !self.scene_bbox.is_valid() {
            return Err(Error::Inconsistent("scene box has non-positive extent".into()));
        }
        for v in &self.views {
            v.intrinsics.validate()?;
            let img = &v.reference_image;
            if img.width != v.intrinsics.width || img.height != v.intrinsics.height {
                return Err(Error::Inconsistent(format!(
                    "view {}: image {}x{} does not match intrinsics {}x{}",
                    v.name, img.width, img.height, v.intrinsics.width, v.intrinsics.height
                )));
            }
            if img
                .data
                .iter()
                .any(|p| p.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0))
            {
                return Err(Error::Inconsistent(format!(
                    "view {}: colors outside [0, 1]",
                    v.name
                )));
            }
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.views.iter().map(|v| v.width() * v.height()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub fn manifest_name(self) -> &'static str {
        match self {
            Split::Train => "transforms_train.json",
            Split::Test => "transforms_test.json",
            Split::Val => "transforms_val.json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub split: Split,
    pub downsample: usize,
    pub background: [f64; 3],
    /// Overrides the manifest box (or the default box when absent).
    pub bbox: Option<Aabb>,
    pub scene_kind: Option<SceneKind>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            split: Split::Train,
            downsample: 1,
            background: [1.0; 3],
            bbox: None,
            scene_kind: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

/// `transforms_*.json`. Fields beyond `camera_angle_x` and `frames` are
/// optional extensions written by the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aabb: Option<[[f64; 3]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_kind: Option<SceneKind>,
    pub frames: Vec<ManifestFrame>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Load(format!("cannot parse manifest {}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn pose_to_rows(pose: &CameraPose) -> [[f64; 4]; 4] {
    let m = pose.matrix();
    let mut rows = [[0.0; 4]; 4];
    for (r, row) in rows.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    rows
}

fn resolve_image_path(root: &Path, file_path: &str) -> PathBuf {
    let p = root.join(file_path);
    if p.extension().is_some() && p.exists() {
        return p;
    }
    for ext in ["png", "exr"] {
        let candidate = PathBuf::from(format!("{}.{ext}", p.display()));
        if candidate.exists() {
            return candidate;
        }
    }
    p
}

struct DecodedImage {
    rgb: RgbImage,
    alpha: Option<GrayImage>,
}

fn decode_image(path: &Path, background: [f64; 3]) -> Result<DecodedImage> {
    let is_exr = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("exr"))
        .unwrap_or(false);
    let dyn_img = image::open(path)
        .map_err(|e| Error::Load(format!("cannot read image {}: {e}", path.display())))?;
    let has_alpha = dyn_img.color().has_alpha();
    let rgba = dyn_img.to_rgba32f();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut rgb = RgbImage::new(w, h, [0.0; 3]);
    let mut alpha = has_alpha.then(|| GrayImage::new(w, h, 1.0));
    for (i, px) in rgba.pixels().enumerate() {
        let a = (px[3] as f64).clamp(0.0, 1.0);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let v = px[c] as f64;
            let lin = if is_exr { v.clamp(0.0, 1.0) } else { srgb_to_linear(v) };
            let composited = if has_alpha {
                lin * a + background[c] * (1.0 - a)
            } else {
                lin
            };
            out[c] = composited.clamp(0.0, 1.0) as f32;
        }
        rgb.data[i] = out;
        if let Some(m) = alpha.as_mut() {
            m.data[i] = a as f32;
        }
    }
    Ok(DecodedImage { rgb, alpha })
}

/// Loads the training split at `1 / downsample` resolution with default
/// options (white background, manifest or default scene box).
pub fn load_dataset(root: &Path, downsample: usize) -> Result<Dataset> {
    load_dataset_with(
        root,
        &LoadOptions {
            downsample,
            ..LoadOptions::default()
        },
    )
}

pub fn load_dataset_with(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    if opts.downsample < 1 {
        return Err(Error::Argument("downsample must be >= 1".into()));
    }
    let manifest_path = root.join(opts.split.manifest_name());
    if !manifest_path.exists() {
        return Err(Error::Load(format!(
            "missing manifest {}",
            manifest_path.display()
        )));
    }
    let manifest = Manifest::read(&manifest_path)?;
    if manifest.frames.is_empty() {
        return Err(Error::Load("manifest has no frames".into()));
    }

    let decoded: Vec<Result<(String, CameraPose, DecodedImage)>> = manifest
        .frames
        .par_iter()
        .map(|frame| {
            let rows = frame.transform_matrix;
            let m = Matrix4::from_fn(|r, c| rows[r][c]);
            let pose = CameraPose::new(m)
                .map_err(|e| Error::Pose(format!("frame {}: {e}", frame.file_path)))?;
            let path = resolve_image_path(root, &frame.file_path);
            let img = decode_image(&path, opts.background)?;
            Ok((frame.file_path.clone(), pose, img))
        })
        .collect();

    let mut views = Vec::with_capacity(decoded.len());
    let mut expected: Option<(usize, usize)> = manifest.w.zip(manifest.h);
    for item in decoded {
        let (name, pose, img) = item?;
        let size = (img.rgb.width, img.rgb.height);
        match expected {
            Some(e) if e != size => {
                return Err(Error::Inconsistent(format!(
                    "image {name} is {}x{}, expected {}x{}",
                    size.0, size.1, e.0, e.1
                )))
            }
            None => expected = Some(size),
            _ => {}
        }
        let intrinsics = CameraIntrinsics::from_fov_x(size.0, size.1, manifest.camera_angle_x);
        let view = CameraView {
            name,
            intrinsics,
            pose,
            reference_image: img.rgb,
            background_mask: img.alpha,
        };
        views.push(if opts.downsample > 1 {
            view.downsampled(opts.downsample)?
        } else {
            view
        });
    }

    let scene_bbox = opts.bbox.unwrap_or_else(|| match manifest.aabb {
        Some([lo, hi]) => Aabb { min: lo, max: hi },
        None => Aabb::centered_cube(DEFAULT_BBOX_HALF_EXTENT),
    });
    let scene_kind = opts
        .scene_kind
        .or(manifest.scene_kind)
        .unwrap_or(SceneKind::Synthetic);
    let dataset = Dataset {
        views,
        scene_bbox,
        scene_kind,
        background: opts.background,
    };
    if opts.split == Split::Train {
        dataset.validate()?;
    }
    Ok(dataset)
}

/// Box-filters every view by `factor` and scales intrinsics to match.
pub fn downsample_views(dataset: &Dataset, factor: usize) -> Result<Dataset> {
    if factor < 1 {
        return Err(Error::Argument("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(dataset.clone());
    }
    let views = dataset
        .views
        .par_iter()
        .map(|v| v.downsampled(factor))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        views,
        ..dataset.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn view_with(pose: CameraPose, width: usize, fx: f64) -> CameraView {
        CameraView {
            name: "v".into(),
            intrinsics: CameraIntrinsics {
                width,
                height: width,
                fx,
                fy: fx,
                cx: width as f64 / 2.0,
                cy: width as f64 / 2.0,
            },
            pose,
            reference_image: RgbImage::new(width, width, [0.5; 3]),
            background_mask: None,
        }
    }

    #[test]
    fn fov_to_focal() {
        let k = CameraIntrinsics::from_fov_x(800, 800, FRAC_PI_2);
        assert!((k.fx - 400.0).abs() < 1e-9);
        let half = k.downscaled(2);
        assert_eq!((half.width, half.height), (400, 400));
        assert!((half.fx - 200.0).abs() < 1e-9);
    }

    #[test]
    fn principal_and_diagonal_rays() {
        let v = view_with(CameraPose::identity(), 800, 300.0);
        let r = v.pixel_ray(399.5, 399.5).unwrap();
        assert!((r.direction - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        let r = v.pixel_ray(400.0 + 300.0 - 0.5, 399.5).unwrap();
        let angle = r.direction.x.atan2(-r.direction.z);
        assert!((angle - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert!(matches!(v.pixel_ray(800.0, 0.0), Err(Error::Bounds { .. })));
        assert!(v.pixel_ray(-0.1, 0.0).is_err());
    }

    #[test]
    fn posed_ray_is_transformed_identity_ray() {
        let pose = CameraPose::look_at(
            Vec3::new(2.0, -1.0, 0.7),
            Vec3::new(0.1, 0.2, -0.3),
            Vec3::z(),
        )
        .unwrap();
        let posed = view_with(pose, 64, 50.0);
        let ident = view_with(CameraPose::identity(), 64, 50.0);
        for &(px, py) in &[(0.0, 0.0), (10.0, 50.0), (63.0, 17.0)] {
            let a = posed.pixel_ray(px, py).unwrap();
            let b = ident.pixel_ray(px, py).unwrap();
            assert!((a.origin - pose.center()).norm() < 1e-12);
            assert!((a.direction - pose.rotation() * b.direction).norm() < 1e-12);
        }
    }

    #[test]
    fn project_round_trip() {
        let pose =
            CameraPose::look_at(Vec3::new(0.0, -4.0, 1.0), Vec3::zeros(), Vec3::z()).unwrap();
        let v = view_with(pose, 32, 40.0);
        for py in 0..32 {
            for px in 0..32 {
                let ray = v.pixel_ray(px as f64, py as f64).unwrap();
                for depth in [0.3, 2.0, 17.0] {
                    let (u, w, _) = v.project(&ray.at(depth)).unwrap();
                    assert!((u - (px as f64 + 0.5)).abs() < 1e-4);
                    assert!((w - (py as f64 + 0.5)).abs() < 1e-4);
                }
            }
        }
        assert!(v.project(&Vec3::new(0.0, -6.0, 1.0)).is_none());
    }

    #[test]
    fn rejects_bad_poses() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(CameraPose::new(m).is_err());
        let mut m = Matrix4::identity();
        m[(3, 0)] = 1.0;
        assert!(CameraPose::new(m).is_err());
        let mut m = Matrix4::identity();
        m[(2, 2)] = -1.0;
        assert!(CameraPose::new(m).is_err());
    }

    #[test]
    fn downsample_preserves_mean_and_constant() {
        let mut v = view_with(CameraPose::identity(), 8, 10.0);
        for (i, p) in v.reference_image.data.iter_mut().enumerate() {
            let (x, y) = (i % 8, i / 8);
            *p = [((x + y) % 2) as f32; 3];
        }
        let ds = Dataset {
            views: vec![v.clone(), v],
            scene_bbox: Aabb::centered_cube(1.0),
            scene_kind: SceneKind::Synthetic,
            background: [1.0; 3],
        };
        assert_eq!(downsample_views(&ds, 1).unwrap(), ds);
        let half = downsample_views(&ds, 2).unwrap();
        for p in &half.views[0].reference_image.data {
            assert_eq!(*p, [0.5; 3]);
        }
        assert!((half.views[0].intrinsics.fx - 5.0).abs() < 1e-12);
        let m0 = ds.views[0].reference_image.mean();
        let m1 = half.views[0].reference_image.mean();
        assert!((m0[0] - m1[0]).abs() < 1e-6);
        assert!(downsample_views(&ds, 0).is_err());
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), 1), Err(Error::Load(_))));
    }
}
