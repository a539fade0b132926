//! Objective assembly and analytic gradients.
//!
//! One fused ray kernel evaluates the photometric residual through the
//! difference planes, the optional visibility quadratic and their gradients
//! with respect to every voxel density, voxel color and plane value. The
//! Cauchy density term is added per voxel afterwards.
//!
//! Pixels are split into a fixed number of contiguous chunks, each chunk
//! scatters into its own dense buffer, and buffers are summed in chunk
//! order. The result therefore does not depend on thread scheduling.

mod adam;
mod gradcheck;

pub use adam::{adam_update, AdamConfig, AdamState, DivergenceGuard};
pub use gradcheck::{check_gradients, random_instance, GradientInstance, GradientReport};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffplane::{blend, d_blend_d_alpha, volume_gradient_scale, DifferencePlane};
use crate::envprior::{cauchy_loss_into, CauchyParams};
use crate::error::{Error, Result};
use crate::renderer::{check_step, march_into, RaySampleList};
use crate::scene_io::CameraView;
use crate::volume::{SkipMask, Stencil, VoxelGrid};

type Rgb = [f64; 3];

pub const DEFAULT_SPARSITY: f64 = 0.1;
pub const DEFAULT_CHUNKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// `F̂ = ½ Σ_i Σ_k (Ĥ_{i,k} - r_{i,k})²`
    pub photometric: f64,
    pub cauchy: f64,
    pub sparsity: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.photometric + self.cauchy + self.sparsity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub density: Vec<f64>,
    pub color: Vec<Rgb>,
    /// One buffer per plane, row-major.
    pub alpha: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros(voxels: usize, planes: &[DifferencePlane]) -> Self {
        Self {
            density: vec![0.0; voxels],
            color: vec![[0.0; 3]; voxels],
            alpha: planes.iter().map(|p| vec![0.0; p.alpha.len()]).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        let bad = self.density.iter().any(|v| !v.is_finite())
            || self.color.iter().flatten().any(|v| !v.is_finite())
            || self.alpha.iter().flatten().any(|v| !v.is_finite());
        if bad {
            Err(Error::Numeric("non-finite gradient".into()))
        } else {
            Ok(())
        }
    }
}

/// How per-chunk gradient buffers are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Fixed chunk count: bit-identical results on any machine.
    Deterministic { chunks: usize },
    /// One chunk per worker thread.
    Fast,
}

impl Default for Reduction {
    fn default() -> Self {
        Reduction::Deterministic {
            chunks: DEFAULT_CHUNKS,
        }
    }
}

impl Reduction {
    fn chunk_count(self, work: usize) -> usize {
        let k = match self {
            Reduction::Deterministic { chunks } => chunks,
            Reduction::Fast => rayon::current_num_threads(),
        };
        k.clamp(1, work.max(1))
    }
}

/// Everything the objective needs besides the optimized variables.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub views: &'a [CameraView],
    pub background: Rgb,
    pub step: f64,
    pub skip: Option<&'a SkipMask>,
    /// Rays stop once throughput falls below this; 0 marches the full box.
    pub cutoff: f64,
    pub cauchy: CauchyParams,
    /// Per-voxel Cauchy weights `w`.
    pub weights: &'a [f64],
    /// `λ_s` of the visibility quadratic; `None` disables it.
    pub sparsity: Option<f64>,
    pub reduction: Reduction,
    /// Global pixel indices to use instead of every pixel.
    pub batch: Option<&'a [usize]>,
}

impl<'a> Objective<'a> {
    pub fn new(views: &'a [CameraView], weights: &'a [f64], step: f64) -> Self {
        Self {
            views,
            background: [1.0; 3],
            step,
            skip: None,
            cutoff: 0.0,
            cauchy: CauchyParams::SYNTHETIC,
            weights,
            sparsity: None,
            reduction: Reduction::default(),
            batch: None,
        }
    }

    /// Value and gradient of `F̂ + L_c + L_s`.
    pub fn evaluate(&self, grid: &VoxelGrid, planes: &[DifferencePlane]) -> Result<(ObjectiveTerms, GradientSet)> {
        if self.weights.len() != grid.voxel_count() {
            return Err(Error::Argument(format!(
                "{} Cauchy weights for {} voxels",
                self.weights.len(),
                grid.voxel_count()
            )));
        }
        let pass = RayPass {
            views: self.views,
            planes: Some(planes),
            background: self.background,
            step: self.step,
            skip: self.skip,
            cutoff: self.cutoff,
            photometric: true,
            sparsity: self.sparsity,
            reduction: self.reduction,
            batch: self.batch,
        };
        let (mut terms, mut grads) = pass.run(grid)?;
        terms.cauchy = cauchy_loss_into(&grid.density, self.weights, &self.cauchy, self.cauchy.unit(grid), &mut grads.density);
        Ok((terms, grads))
    }

    /// Value only.
    pub fn value(&self, grid: &VoxelGrid, planes: &[DifferencePlane]) -> Result<ObjectiveTerms> {
        Ok(self.evaluate(grid, planes)?.0)
    }

    /// The same objective without planes and without the visibility term:
    /// `½ Σ (H_d - r)² + L_c`.
    pub fn evaluate_baseline(&self, grid: &VoxelGrid) -> Result<(ObjectiveTerms, GradientSet)> {
        let (photometric, mut grads) = baseline_pass(
            grid,
            self.views,
            self.step,
            self.skip,
            self.background,
            self.cutoff,
            self.reduction,
        )?;
        let cauchy = cauchy_loss_into(&grid.density, self.weights, &self.cauchy, self.cauchy.unit(grid), &mut grads.density);
        Ok((
            ObjectiveTerms {
                photometric,
                cauchy,
                sparsity: 0.0,
            },
            grads,
        ))
    }
}

/// Photometric residual through the planes and its full gradient.
pub fn photometric_pass(
    grid: &VoxelGrid,
    views: &[CameraView],
    planes: &[DifferencePlane],
    step: f64,
    skip: Option<&SkipMask>,
    background: Rgb,
) -> Result<(f64, GradientSet)> {
    let pass = RayPass {
        views,
        planes: Some(planes),
        background,
        step,
        skip,
        cutoff: 0.0,
        photometric: true,
        sparsity: None,
        reduction: Reduction::default(),
        batch: None,
    };
    let (terms, grads) = pass.run(grid)?;
    Ok((terms.photometric, grads))
}

/// Visibility quadratic `λ_s Σ_rays (-4 (T - ½)² + 1)` and its density
/// gradient.
pub fn sparsity_pass(
    grid: &VoxelGrid,
    views: &[CameraView],
    step: f64,
    skip: Option<&SkipMask>,
    lambda_s: f64,
) -> Result<(f64, Vec<f64>)> {
    let pass = RayPass {
        views,
        planes: None,
        background: [0.0; 3],
        step,
        skip,
        cutoff: 0.0,
        photometric: false,
        sparsity: Some(lambda_s),
        reduction: Reduction::default(),
        batch: None,
    };
    let (terms, grads) = pass.run(grid)?;
    Ok((terms.sparsity, grads.density))
}

/// Plain volume fitting `½ Σ (H_d + T·bg - r)²` with no planes.
pub fn baseline_pass(
    grid: &VoxelGrid,
    views: &[CameraView],
    step: f64,
    skip: Option<&SkipMask>,
    background: Rgb,
    cutoff: f64,
    reduction: Reduction,
) -> Result<(f64, GradientSet)> {
    let pass = RayPass {
        views,
        planes: None,
        background,
        step,
        skip,
        cutoff,
        photometric: true,
        sparsity: None,
        reduction,
        batch: None,
    };
    let (terms, grads) = pass.run(grid)?;
    Ok((terms.photometric, grads))
}

pub fn per_visibility_loss(t: f64, lambda_s: f64) -> f64 {
    lambda_s * (-4.0 * (t - 0.5) * (t - 0.5) + 1.0)
}

fn dot(a: &Rgb, b: &Rgb) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Default)]
struct RayScratch {
    list: RaySampleList,
    stencil: Vec<Stencil>,
    delta: Vec<f64>,
    color: Vec<Rgb>,
    trans: Vec<f64>,
    alpha: Vec<f64>,
}

/// Forward march recording what the backward pass needs. Returns the
/// volume color (no background) and the final throughput.
fn forward(
    grid: &VoxelGrid,
    view: &CameraView,
    x: usize,
    y: usize,
    step: f64,
    skip: Option<&SkipMask>,
    cutoff: f64,
    s: &mut RayScratch,
) -> Result<(Rgb, f64)> {
    let ray = view.ray_through(x as f64 + 0.5, y as f64 + 0.5);
    march_into(grid, &ray, f64::INFINITY, step, skip, &mut s.list);
    s.stencil.clear();
    s.delta.clear();
    s.color.clear();
    s.trans.clear();
    s.alpha.clear();
    let mut h = [0.0; 3];
    let mut optical_depth = 0.0f64;
    for sample in &s.list.samples {
        let t_here = (-optical_depth).exp();
        if t_here < cutoff {
            break;
        }
        let (sigma, c) = grid.interpolate(&sample.stencil);
        if !sigma.is_finite() || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite sample on view {} pixel ({x}, {y}): σ = {sigma}, c = {c:?}",
                view.name
            )));
        }
        let a = 1.0 - (-sigma * sample.delta).exp();
        let w = t_here * a;
        h[0] += w * c[0];
        h[1] += w * c[1];
        h[2] += w * c[2];
        optical_depth += sigma * sample.delta;
        s.stencil.push(sample.stencil);
        s.delta.push(sample.delta);
        s.color.push(c);
        s.trans.push(t_here);
        s.alpha.push(a);
    }
    Ok((h, (-optical_depth).exp()))
}

/// Scatters `∂L/∂σ` and `∂L/∂c` for upstream color gradient `g` and
/// throughput gradient `g_t` into the dense buffers.
///
/// With `a_j = 1 - e^{-σ_j δ_j}` and the background acting as a final
/// opaque sample,
/// `∂L/∂σ_j = δ_j (T_{j+1} g·c_j - Σ_{m>j} T_m a_m g·c_m - T_N (g·bg + g_t))`.
fn backward(
    s: &RayScratch,
    g: &Rgb,
    g_t: f64,
    background: &Rgb,
    t_final: f64,
    density: &mut [f64],
    color: &mut [Rgb],
) {
    let mut suffix = t_final * (dot(g, background) + g_t);
    for j in (0..s.stencil.len()).rev() {
        let gc = dot(g, &s.color[j]);
        let t_next = s.trans[j] * (1.0 - s.alpha[j]);
        let d_sigma = s.delta[j] * (t_next * gc - suffix);
        let weight = s.trans[j] * s.alpha[j];
        suffix += weight * gc;
        let st = &s.stencil[j];
        for k in 0..8 {
            let i = st.indices[k] as usize;
            let w = st.weights[k];
            density[i] += w * d_sigma;
            let wc = w * weight;
            let cell = &mut color[i];
            cell[0] += wc * g[0];
            cell[1] += wc * g[1];
            cell[2] += wc * g[2];
        }
    }
}

struct RayPass<'a> {
    views: &'a [CameraView],
    planes: Option<&'a [DifferencePlane]>,
    background: Rgb,
    step: f64,
    skip: Option<&'a SkipMask>,
    cutoff: f64,
    photometric: bool,
    sparsity: Option<f64>,
    reduction: Reduction,
    batch: Option<&'a [usize]>,
}

struct ChunkOut {
    photometric: f64,
    sparsity: f64,
    density: Vec<f64>,
    color: Vec<Rgb>,
    /// `(view, pixel, ∂/∂α)` for every pixel in the chunk.
    alpha: Vec<(usize, usize, f64)>,
}

impl RayPass<'_> {
    fn locate(&self, offsets: &[usize], global: usize) -> (usize, usize) {
        let v = offsets.partition_point(|&o| o <= global) - 1;
        (v, global - offsets[v])
    }

    fn run(&self, grid: &VoxelGrid) -> Result<(ObjectiveTerms, GradientSet)> {
        check_step(self.step)?;
        if let Some(planes) = self.planes {
            if planes.len() != self.views.len() {
                return Err(Error::Argument(format!(
                    "{} planes for {} views",
                    planes.len(),
                    self.views.len()
                )));
            }
            for (p, v) in planes.iter().zip(self.views) {
                if p.width != v.width() || p.height != v.height() {
                    return Err(Error::Argument(format!(
                        "plane {}x{} does not match view {} at {}x{}",
                        p.width,
                        p.height,
                        v.name,
                        v.width(),
                        v.height()
                    )));
                }
            }
        }
        let mut offsets = Vec::with_capacity(self.views.len() + 1);
        offsets.push(0);
        for v in self.views {
            offsets.push(offsets.last().unwrap() + v.width() * v.height());
        }
        let total = *offsets.last().unwrap();
        let work = self.batch.map_or(total, |b| b.len());
        let chunks = self.reduction.chunk_count(work);
        let n = grid.voxel_count();

        let outs: Vec<ChunkOut> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let lo = c * work / chunks;
                let hi = (c + 1) * work / chunks;
                self.run_chunk(grid, &offsets, lo, hi, n)
            })
            .collect::<Result<_>>()?;

        let planes: &[DifferencePlane] = self.planes.unwrap_or(&[]);
        let mut terms = ObjectiveTerms::default();
        let mut grads = GradientSet::zeros(n, planes);
        for out in outs {
            terms.photometric += out.photometric;
            terms.sparsity += out.sparsity;
            for (acc, v) in grads.density.iter_mut().zip(&out.density) {
                *acc += v;
            }
            for (acc, v) in grads.color.iter_mut().zip(&out.color) {
                acc[0] += v[0];
                acc[1] += v[1];
                acc[2] += v[2];
            }
            for (view, pixel, d) in out.alpha {
                grads.alpha[view][pixel] += d;
            }
        }
        Ok((terms, grads))
    }

    fn run_chunk(&self, grid: &VoxelGrid, offsets: &[usize], lo: usize, hi: usize, n: usize) -> Result<ChunkOut> {
        let mut out = ChunkOut {
            photometric: 0.0,
            sparsity: 0.0,
            density: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            alpha: Vec::new(),
        };
        let mut scratch = RayScratch::default();
        for item in lo..hi {
            let global = self.batch.map_or(item, |b| b[item]);
            let (v, pixel) = self.locate(offsets, global);
            let view = &self.views[v];
            let (x, y) = (pixel % view.width(), pixel / view.width());
            let (h_vol, t_final) = forward(grid, view, x, y, self.step, self.skip, self.cutoff, &mut scratch)?;
            let mut g = [0.0; 3];
            let mut g_t = 0.0;
            if self.photometric {
                let bg = &self.background;
                let h = [
                    h_vol[0] + t_final * bg[0],
                    h_vol[1] + t_final * bg[1],
                    h_vol[2] + t_final * bg[2],
                ];
                let rf = view.reference_image.get(x, y);
                let r = [rf[0] as f64, rf[1] as f64, rf[2] as f64];
                match self.planes {
                    Some(planes) => {
                        let plane = &planes[v];
                        let alpha = plane.alpha[pixel];
                        let h_hat = blend(&h, &r, alpha, plane.sigma_s);
                        let e = [h_hat[0] - r[0], h_hat[1] - r[1], h_hat[2] - r[2]];
                        let scale = volume_gradient_scale(alpha, plane.sigma_s);
                        let da = d_blend_d_alpha(&h, &r, alpha, plane.sigma_s);
                        out.photometric += 0.5 * dot(&e, &e);
                        out.alpha.push((v, pixel, dot(&e, &da)));
                        g = [e[0] * scale, e[1] * scale, e[2] * scale];
                    }
                    None => {
                        let e = [h[0] - r[0], h[1] - r[1], h[2] - r[2]];
                        out.photometric += 0.5 * dot(&e, &e);
                        g = e;
                    }
                }
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite residual on view {} pixel ({x}, {y})",
                        view.name
                    )));
                }
            }
            if let Some(lambda_s) = self.sparsity {
                out.sparsity += per_visibility_loss(t_final, lambda_s);
                g_t = -8.0 * lambda_s * (t_final - 0.5);
            }
            backward(&scratch, &g, g_t, &self.background, t_final, &mut out.density, &mut out.color);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::gradcheck::random_instance;
    use crate::renderer::render_image;

    #[test]
    fn forward_matches_renderer() {
        let inst = random_instance(1);
        let step = 0.05;
        let mut s = RayScratch::default();
        for view in &inst.views {
            let r = render_image(&inst.grid, view, step, None, [0.2, 0.4, 0.6]).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let (h, t) = forward(&inst.grid, view, x, y, step, None, 0.0, &mut s).unwrap();
                    let c = r.color.get(x, y);
                    assert!((h[0] + t * 0.2 - c[0] as f64).abs() < 1e-6);
                    assert!((h[2] + t * 0.6 - c[2] as f64).abs() < 1e-6);
                    assert!((t - r.transmittance.get(x, y) as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn exact_fit_has_zero_residual() {
        let inst = random_instance(2);
        let step = 0.1;
        let mut views = inst.views.clone();
        for v in views.iter_mut() {
            v.reference_image = render_image(&inst.grid, v, step, None, [1.0; 3]).unwrap().color;
        }
        // references are stored as f32, so "zero" means f32 rounding
        let planes: Vec<_> = views.iter().map(|_| DifferencePlane::new(8, 8, 0.002)).collect();
        let (f, g) = photometric_pass(&inst.grid, &views, &planes, step, None, [1.0; 3]).unwrap();
        assert!(f < 1e-12, "{f}");
        assert!(g.density.iter().all(|v| v.abs() < 1e-5));
        assert!(g.alpha.iter().flatten().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_sigma_s_matches_baseline_bitwise() {
        let mut inst = random_instance(3);
        for p in inst.planes.iter_mut() {
            p.sigma_s = 0.0;
        }
        let (f, g) = photometric_pass(&inst.grid, &inst.views, &inst.planes, 0.07, None, [1.0; 3]).unwrap();
        let (fb, gb) =
            baseline_pass(&inst.grid, &inst.views, 0.07, None, [1.0; 3], 0.0, Reduction::default()).unwrap();
        assert_eq!(f.to_bits(), fb.to_bits());
        assert_eq!(g.density, gb.density);
        assert_eq!(g.color, gb.color);
        assert!(g.alpha.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn sparsity_roots_and_vertex() {
        assert_eq!(per_visibility_loss(0.0, 0.1), 0.0);
        assert!(per_visibility_loss(1.0, 0.1).abs() < 1e-17);
        assert_eq!(per_visibility_loss(0.5, 0.1), 0.1);
    }

    fn fd_check(f: impl Fn(f64) -> f64, x: f64, analytic: f64) {
        let h = 1e-5 * x.abs().max(1.0);
        let fd = (f(x + h) - f(x - h)) / (2.0 * h);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-7);
        assert!(rel < 1e-5, "fd {fd} analytic {analytic}");
    }

    #[test]
    fn sparsity_gradient_matches_differences() {
        let inst = random_instance(4);
        let step = 0.06;
        let (_, g) = sparsity_pass(&inst.grid, &inst.views, step, None, 0.1).unwrap();
        for i in 0..inst.grid.voxel_count() {
            let eval = |s: f64| {
                let mut grid = inst.grid.clone();
                grid.density[i] = s;
                sparsity_pass(&grid, &inst.views, step, None, 0.1).unwrap().0
            };
            fd_check(eval, inst.grid.density[i], g[i]);
        }
    }

    #[test]
    fn fused_equals_separate_passes() {
        let inst = random_instance(5);
        let step = 0.08;
        let mut obj = Objective::new(&inst.views, &inst.weights, step);
        obj.sparsity = Some(0.1);
        let (terms, g) = obj.evaluate(&inst.grid, &inst.planes).unwrap();
        let (f, gp) = photometric_pass(&inst.grid, &inst.views, &inst.planes, step, None, [1.0; 3]).unwrap();
        let (ls, gs) = sparsity_pass(&inst.grid, &inst.views, step, None, 0.1).unwrap();
        let (lc, gc) = crate::envprior::cauchy_loss(&inst.grid.density, &inst.weights, &CauchyParams::SYNTHETIC, CauchyParams::SYNTHETIC.unit(&inst.grid));
        assert!((terms.photometric - f).abs() < 1e-12);
        assert!((terms.sparsity - ls).abs() < 1e-12);
        assert!((terms.cauchy - lc).abs() < 1e-12);
        for i in 0..g.density.len() {
            assert!((g.density[i] - gp.density[i] - gs[i] - gc[i]).abs() < 1e-9);
        }
        assert_eq!(g.alpha, gp.alpha);
    }

    #[test]
    fn reduction_is_schedule_independent() {
        let inst = random_instance(6);
        let obj = Objective::new(&inst.views, &inst.weights, 0.05);
        let results: Vec<_> = [1, 3]
            .iter()
            .map(|&threads| {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
                pool.install(|| obj.evaluate(&inst.grid, &inst.planes).unwrap())
            })
            .collect();
        assert_eq!(results[0].0.photometric.to_bits(), results[1].0.photometric.to_bits());
        assert_eq!(results[0].1, results[1].1);
    }

    #[test]
    fn chunk_count_only_reorders_sums() {
        let inst = random_instance(7);
        let mut obj = Objective::new(&inst.views, &inst.weights, 0.05);
        let (a, ga) = obj.evaluate(&inst.grid, &inst.planes).unwrap();
        obj.reduction = Reduction::Deterministic { chunks: 13 };
        let (b, gb) = obj.evaluate(&inst.grid, &inst.planes).unwrap();
        assert!((a.photometric - b.photometric).abs() < 1e-12 * a.photometric.max(1.0));
        for (x, y) in ga.density.iter().zip(&gb.density) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_of_everything_equals_full_pass() {
        let inst = random_instance(8);
        let all: Vec<usize> = (0..128).collect();
        let mut obj = Objective::new(&inst.views, &inst.weights, 0.05);
        let (a, ga) = obj.evaluate(&inst.grid, &inst.planes).unwrap();
        obj.batch = Some(&all);
        let (b, gb) = obj.evaluate(&inst.grid, &inst.planes).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn mismatched_planes_are_rejected() {
        let inst = random_instance(9);
        let planes = vec![DifferencePlane::new(4, 4, 0.002); 2];
        assert!(photometric_pass(&inst.grid, &inst.views, &planes, 0.1, None, [1.0; 3]).is_err());
    }

    #[test]
    fn non_finite_density_reports_pixel() {
        let mut inst = random_instance(10);
        inst.grid.density.iter_mut().for_each(|d| *d = f64::NAN);
        let err = photometric_pass(&inst.grid, &inst.views, &inst.planes, 0.1, None, [1.0; 3]).unwrap_err();
        assert!(err.to_string().contains("pixel"));
    }
}
