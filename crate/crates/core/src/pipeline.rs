//! Coarse-to-fine reconstruction.
//!
//! Each level works on a finer grid and sharper images. Between levels the
//! grid and planes are upsampled, the previous grid becomes the skip mask,
//! and, when enabled, the environment-map prior is recomputed once to fix
//! the per-voxel Cauchy weights for the level. The first level has no prior
//! yet and uses the constant baseline weight.

mod checkpoint;

pub use checkpoint::Checkpoint;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffplane::{DifferencePlane, DEFAULT_SIGMA_S};
use crate::envprior::{compute_env_prior, CauchyParams, EnvPriorBuffer, Normalization, BASELINE_WEIGHT};
use crate::error::{Error, Result};
use crate::export::psnr;
use crate::optimizer::{AdamConfig, AdamState, DivergenceGuard, Objective, Reduction, DEFAULT_CHUNKS, DEFAULT_SPARSITY};
use crate::renderer::{render_image, DEFAULT_STEP_FACTOR};
use crate::scene_io::{downsample_views, Dataset, SceneKind};
use crate::volume::{build_skip_mask, SkipMask, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    /// Cells per axis.
    pub resolution: usize,
    /// Image box-filter factor for this level.
    pub downsample: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchySchedule {
    pub levels: Vec<LevelSpec>,
    pub prior_enabled: bool,
    pub planes_enabled: bool,
}

impl Default for HierarchySchedule {
    fn default() -> Self {
        let level = |resolution, downsample| LevelSpec {
            resolution,
            downsample,
            epochs: 128,
        };
        Self {
            levels: vec![level(32, 8), level(64, 4), level(128, 2)],
            prior_enabled: true,
            planes_enabled: true,
        }
    }
}

impl HierarchySchedule {
    /// Adds the 256³ level at full image resolution.
    pub fn with_full_resolution(mut self) -> Self {
        if self.levels.last().is_some_and(|l| l.resolution < 256) {
            self.levels.push(LevelSpec {
                resolution: 256,
                downsample: 1,
                epochs: 128,
            });
        }
        self
    }

    pub fn truncated(mut self, levels: usize) -> Self {
        self.levels.truncate(levels.max(1));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Argument("schedule needs at least one level".into()));
        }
        for w in self.levels.windows(2) {
            if w[1].resolution <= w[0].resolution {
                return Err(Error::Argument(format!(
                    "resolutions must increase: {} then {}",
                    w[0].resolution, w[1].resolution
                )));
            }
        }
        if self.levels.iter().any(|l| l.resolution == 0 || l.downsample == 0) {
            return Err(Error::Argument("zero resolution or downsample factor".into()));
        }
        Ok(())
    }
}

/// Every tunable constant of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schedule: HierarchySchedule,
    /// Difference-plane scale `σ_s`.
    pub sigma_s: f64,
    /// `λ_c`; `None` picks 0.05 for synthetic and 0.01 for real scenes.
    pub cauchy_scale: Option<f64>,
    /// `λ_n`.
    pub cauchy_weight_scale: f64,
    /// Penalize `σ·edge` rather than `σ`, which keeps the balance against
    /// the photometric term stable across levels.
    pub cauchy_per_voxel: bool,
    /// `λ_v`: parent density below which space is skipped.
    pub skip_threshold: f64,
    /// `λ_s`, used for real scenes only.
    pub sparsity: f64,
    /// Constant Cauchy weight when the prior is off or not yet available.
    pub baseline_weight: f64,
    pub normalization: Normalization,
    /// March step as a fraction of the voxel edge.
    pub step_factor: f64,
    /// Rays stop when throughput drops below this.
    pub cutoff: f64,
    pub adam: AdamConfig,
    pub divergence_patience: usize,
    /// Learning rates decay exponentially within each level down to this
    /// fraction at its last epoch.
    pub lr_decay: f64,
    /// Difference planes stay frozen for this many epochs at the start of
    /// each level, while the residual is still dominated by the untrained or
    /// freshly upsampled volume. Planes only ever grow under the photometric
    /// term, so residual absorbed early is never given back.
    pub plane_warmup: usize,
    pub deterministic: bool,
    pub chunks: usize,
    /// Random pixels per epoch instead of all of them.
    pub ray_batch: Option<usize>,
    pub seed: u64,
    /// Held-out PSNR every this many epochs (and always at a level's end);
    /// 0 evaluates only at level ends.
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: HierarchySchedule::default(),
            sigma_s: DEFAULT_SIGMA_S,
            cauchy_scale: None,
            cauchy_weight_scale: 10.0,
            cauchy_per_voxel: true,
            skip_threshold: 1.0,
            sparsity: DEFAULT_SPARSITY,
            baseline_weight: BASELINE_WEIGHT,
            normalization: Normalization::GlobalTsum,
            step_factor: DEFAULT_STEP_FACTOR,
            cutoff: 1e-4,
            adam: AdamConfig::default(),
            divergence_patience: 10,
            lr_decay: 1.0,
            plane_warmup: 16,
            deterministic: true,
            chunks: DEFAULT_CHUNKS,
            ray_batch: None,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl RunConfig {
    /// Reads TOML or JSON by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let scalars = [
            ("sigma_s", self.sigma_s),
            ("cauchy_weight_scale", self.cauchy_weight_scale),
            ("skip_threshold", self.skip_threshold),
            ("sparsity", self.sparsity),
            ("baseline_weight", self.baseline_weight),
            ("cutoff", self.cutoff),
            ("lr_decay", self.lr_decay),
            ("lr_density", self.adam.lr_density),
            ("lr_color", self.adam.lr_color),
            ("lr_alpha", self.adam.lr_alpha),
            ("cauchy_scale", self.cauchy_scale.unwrap_or(0.0)),
        ];
        for (name, v) in scalars {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.step_factor > 0.0) {
            return Err(Error::Argument("step_factor must be positive".into()));
        }
        Ok(())
    }

    pub fn cauchy(&self, kind: SceneKind) -> CauchyParams {
        let default = match kind {
            SceneKind::Synthetic => CauchyParams::SYNTHETIC,
            SceneKind::Real => CauchyParams::REAL,
        };
        CauchyParams {
            scale: self.cauchy_scale.unwrap_or(default.scale),
            weight_scale: self.cauchy_weight_scale,
            per_voxel: self.cauchy_per_voxel,
        }
    }

    pub fn reduction(&self) -> Reduction {
        if self.deterministic {
            Reduction::Deterministic { chunks: self.chunks }
        } else {
            Reduction::Fast
        }
    }

    /// Both additions switched off: `σ_s = 0` and the constant weight.
    pub fn baseline(&self) -> Self {
        let mut c = self.clone();
        c.schedule.planes_enabled = false;
        c.schedule.prior_enabled = false;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub level: usize,
    pub epoch: usize,
    pub photometric: f64,
    pub cauchy: f64,
    pub sparsity: f64,
    pub psnr_heldout: Option<f64>,
    pub lr_scale: f64,
    pub elapsed_s: f64,
}

impl EpochLog {
    /// The log line without wall-clock time, for run-to-run comparison.
    pub fn without_timing(&self) -> EpochLog {
        EpochLog {
            elapsed_s: 0.0,
            ..self.clone()
        }
    }
}

pub fn write_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut s = String::new();
    for l in logs {
        s.push_str(&serde_json::to_string(l)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub grid: VoxelGrid,
    pub planes: Vec<DifferencePlane>,
    pub logs: Vec<EpochLog>,
    /// Skip mask used by the last level.
    pub skip: Option<SkipMask>,
    /// Cauchy weights of the last level.
    pub weights: EnvPriorBuffer,
    /// Training views at the last level's resolution.
    pub views: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Path_ {
    General,
    Baseline,
}

/// Optional behavior around [`run`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub test: Option<&'a Dataset>,
    /// Written after every completed level.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `checkpoint_dir` when present.
    pub resume: bool,
    /// Stop after this many levels (for interrupted-run tests).
    pub stop_after_level: Option<usize>,
}

pub fn run(dataset: &Dataset, config: &RunConfig) -> Result<ReconstructionResult> {
    run_with(dataset, config, &RunOptions::default())
}

pub fn run_with(dataset: &Dataset, config: &RunConfig, opts: &RunOptions) -> Result<ReconstructionResult> {
    drive(dataset, config, opts, Path_::General)
}

/// Plain volume fitting with the constant Cauchy weight and no planes,
/// through its own objective code.
pub fn run_baseline(dataset: &Dataset, config: &RunConfig, opts: &RunOptions) -> Result<ReconstructionResult> {
    drive(dataset, &config.baseline(), opts, Path_::Baseline)
}

fn heldout_psnr(grid: &VoxelGrid, test: &Dataset, step: f64, skip: Option<&SkipMask>) -> Result<f64> {
    let mut sum = 0.0;
    for v in &test.views {
        let r = render_image(grid, v, step, skip, test.background)?;
        sum += psnr(&r.color, &v.reference_image)?;
    }
    Ok(sum / test.views.len().max(1) as f64)
}

fn drive(dataset: &Dataset, config: &RunConfig, opts: &RunOptions, path: Path_) -> Result<ReconstructionResult> {
    config.validate()?;
    dataset.validate()?;
    let start = Instant::now();
    let bbox = dataset.scene_bbox;
    let kind = dataset.scene_kind;
    let sigma_s = if config.schedule.planes_enabled { config.sigma_s } else { 0.0 };
    let cauchy = config.cauchy(kind);
    let sparsity = (kind == SceneKind::Real).then_some(config.sparsity);

    let mut logs: Vec<EpochLog> = Vec::new();
    let mut state: Option<(VoxelGrid, Vec<DifferencePlane>)> = None;
    let mut first_level = 0;
    if opts.resume {
        if let Some(dir) = &opts.checkpoint_dir {
            if let Some(cp) = Checkpoint::load(dir)? {
                log::info!("resuming after level {}", cp.level);
                first_level = cp.level + 1;
                logs = cp.logs;
                state = Some((cp.grid, cp.planes));
            }
        }
    }

    let mut last: Option<(Dataset, Option<SkipMask>, EnvPriorBuffer)> = None;
    for (li, level) in config.schedule.levels.iter().enumerate().skip(first_level) {
        let views = downsample_views(dataset, level.downsample)?;
        let test = opts.test.map(|t| downsample_views(t, level.downsample)).transpose()?;
        let res = [level.resolution; 3];
        let (mut grid, mut planes, skip) = match state.take() {
            None => {
                let grid = VoxelGrid::initial(res, bbox)?;
                let planes = views
                    .views
                    .iter()
                    .map(|v| DifferencePlane::new(v.width(), v.height(), sigma_s))
                    .collect();
                (grid, planes, None)
            }
            Some((prev, prev_planes)) => {
                let skip = build_skip_mask(&prev, config.skip_threshold);
                let mut grid = prev.upsample(res)?;
                // skipped space never reaches the renderer, so clear it to
                // keep the stored field equal to the rendered one
                for i in 0..grid.voxel_count() {
                    if skip.is_empty_at(&grid.center_of(i)) {
                        grid.density[i] = 0.0;
                    }
                }
                let planes = prev_planes
                    .iter()
                    .zip(&views.views)
                    .map(|(p, v)| p.upsample(v.width(), v.height()))
                    .collect::<Result<Vec<_>>>()?;
                (grid, planes, Some(skip))
            }
        };
        let step = config.step_factor * grid.voxel_edge();
        let weights = if config.schedule.prior_enabled && li > 0 {
            let t = Instant::now();
            let w = compute_env_prior(&grid, &views.views, step, skip.as_ref(), config.normalization)?;
            log::info!("level {li}: prior pass in {:.1}s", t.elapsed().as_secs_f64());
            w
        } else {
            EnvPriorBuffer::constant(res, config.baseline_weight)
        };

        let mut base = Objective::new(&views.views, &weights.weights, step);
        base.background = dataset.background;
        base.skip = skip.as_ref();
        base.cutoff = config.cutoff;
        base.cauchy = cauchy;
        base.sparsity = sparsity;
        base.reduction = config.reduction();

        let mut adam = AdamState::new(&grid, &planes);
        let mut guard = DivergenceGuard::new(config.divergence_patience);
        let mut lr_scale = 1.0;
        let total_pixels = views.pixel_count();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (li as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for epoch in 0..level.epochs {
            let batch: Option<Vec<usize>> = config.ray_batch.filter(|&b| b < total_pixels).map(|b| {
                let mut idx = sample(&mut rng, total_pixels, b).into_vec();
                idx.sort_unstable();
                idx
            });
            let objective = Objective {
                batch: batch.as_deref(),
                ..base
            };
            let (terms, grads) = match path {
                Path_::General => objective.evaluate(&grid, &planes),
                Path_::Baseline => objective.evaluate_baseline(&grid),
            }
            .map_err(|e| Error::Numeric(format!("level {li} epoch {epoch}: {e}")))?;
            grads.check_finite()?;
            let eval_now = epoch + 1 == level.epochs || (config.eval_every > 0 && epoch % config.eval_every == 0);
            let psnr_heldout = match (&test, eval_now) {
                (Some(t), true) => Some(heldout_psnr(&grid, t, step, skip.as_ref())?),
                _ => None,
            };
            let progress = if level.epochs > 1 { epoch as f64 / (level.epochs - 1) as f64 } else { 0.0 };
            let lr = lr_scale * config.lr_decay.powf(progress);
            logs.push(EpochLog {
                level: li,
                epoch,
                photometric: terms.photometric,
                cauchy: terms.cauchy,
                sparsity: terms.sparsity,
                psnr_heldout,
                lr_scale: lr,
                elapsed_s: start.elapsed().as_secs_f64(),
            });
            log::debug!(
                "level {li} epoch {epoch}: F {:.6} Lc {:.6} Ls {:.6}",
                terms.photometric,
                terms.cauchy,
                terms.sparsity
            );
            if guard.observe(terms.photometric) {
                lr_scale *= 0.5;
                log::warn!("level {li} epoch {epoch}: objective rose {} times in a row, learning rate now x{lr_scale}", guard.patience);
            }
            match path {
                Path_::General if epoch < config.plane_warmup => {
                    adam.step(&config.adam, lr, &mut grid, &mut [], &grads)
                }
                Path_::General => adam.step(&config.adam, lr, &mut grid, &mut planes, &grads),
                Path_::Baseline => adam.step(&config.adam, lr, &mut grid, &mut [], &grads),
            }
            grid.check_finite()?;
        }
        log::info!(
            "level {li} ({}³, 1/{} images) done at {:.1}s",
            level.resolution,
            level.downsample,
            start.elapsed().as_secs_f64()
        );
        if let Some(dir) = &opts.checkpoint_dir {
            Checkpoint {
                level: li,
                grid: grid.clone(),
                planes: planes.clone(),
                logs: logs.clone(),
            }
            .save(dir)?;
        }
        state = Some((grid, planes));
        last = Some((views, skip, weights));
        if opts.stop_after_level == Some(li) {
            break;
        }
    }

    let (grid, planes) = state.ok_or_else(|| Error::Argument("no level was run".into()))?;
    let (views, skip, weights) = match last {
        Some(l) => l,
        None => {
            // every level came from the checkpoint
            let lvl = config.schedule.levels.last().unwrap();
            let views = downsample_views(dataset, lvl.downsample)?;
            (views, None, EnvPriorBuffer::constant(grid.resolution(), config.baseline_weight))
        }
    };
    Ok(ReconstructionResult {
        grid,
        planes,
        logs,
        skip,
        weights,
        views,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPlanes,
    NoPrior,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoPlanes, Variant::NoPrior, Variant::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPlanes => "no_planes",
            Variant::NoPrior => "no_prior",
            Variant::Baseline => "baseline",
        }
    }

    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoPlanes => c.schedule.planes_enabled = false,
            Variant::NoPrior => c.schedule.prior_enabled = false,
            Variant::Baseline => c = base.baseline(),
        }
        c
    }

    pub fn run(self, dataset: &Dataset, base: &RunConfig, opts: &RunOptions) -> Result<ReconstructionResult> {
        let cfg = self.configure(base);
        match self {
            Variant::Baseline => run_baseline(dataset, &cfg, opts),
            _ => run_with(dataset, &cfg, opts),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub photometric: f64,
    pub psnr_heldout: Option<f64>,
    pub fscore: Option<crate::export::FScore>,
    pub wall_clock_s: f64,
}

/// Runs every variant under the same config and seed. `score` turns a
/// finished run into a geometry F-score when a reference is available.
pub fn ablation(
    dataset: &Dataset,
    test: Option<&Dataset>,
    config: &RunConfig,
    score: &dyn Fn(&ReconstructionResult) -> Result<Option<crate::export::FScore>>,
) -> Result<Vec<VariantReport>> {
    let opts = RunOptions {
        test,
        ..RunOptions::default()
    };
    let mut out = Vec::new();
    for v in Variant::ALL {
        let t = Instant::now();
        let r = v.run(dataset, config, &opts)?;
        let wall = t.elapsed().as_secs_f64();
        let last = r.logs.last();
        out.push(VariantReport {
            variant: v,
            photometric: last.map_or(f64::NAN, |l| l.photometric),
            psnr_heldout: last.and_then(|l| l.psnr_heldout),
            fscore: score(&r)?,
            wall_clock_s: wall,
        });
        log::info!("variant {} finished in {wall:.1}s", v.name());
    }
    Ok(out)
}
