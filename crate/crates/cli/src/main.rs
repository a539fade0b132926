use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use voxrecon::diffplane::DifferencePlane;
use voxrecon::export::{
    default_iso, geometry_fscore, marching_cubes, render_decomposition, write_decomposition, write_json, write_png,
    MeshOptions, TriMesh,
};
use voxrecon::optimizer::{check_gradients, random_instance, Objective};
use voxrecon::pipeline::{ablation, run_with, write_log, ReconstructionResult, RunConfig, RunOptions};
use voxrecon::renderer::render_image;
use voxrecon::scene_io::{load_dataset_with, Dataset, LoadOptions, Split};
use voxrecon::synth;
use voxrecon::volume::VoxelGrid;

#[derive(Parser)]
#[command(name = "voxrecon", version, about = "Voxel radiance field reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset root with transforms_{train,test}.json.
    #[arg(long)]
    data: PathBuf,
    /// Extra image downsampling applied on load.
    #[arg(long, default_value_t = 1)]
    downsample: usize,
    /// Background color as r,g,b in [0, 1].
    #[arg(long, value_parser = parse_rgb, default_value = "1,1,1")]
    background: [f64; 3],
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML or JSON run configuration; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use only the first N levels of the schedule.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    no_planes: bool,
    #[arg(long)]
    no_prior: bool,
    /// Fixed-order gradient reduction (bit-reproducible).
    #[arg(long)]
    deterministic: bool,
    /// Append the 256³ level.
    #[arg(long)]
    full_resolution: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a grid to a dataset and write grid, planes, mesh and logs.
    Reconstruct {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in <out>/checkpoint.
        #[arg(long)]
        resume: bool,
        /// Also write the per-voxel prior weights of the final level.
        #[arg(long)]
        dump_prior: bool,
    },
    /// Run full, no-planes, no-prior and baseline variants and report metrics.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Reference mesh; defaults to <data>/gt_mesh.ply when present.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Render decomposition images from a saved reconstruction.
    Render {
        #[command(flatten)]
        data: DataArgs,
        /// Output directory of a previous `reconstruct`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Display gain for the brightened view-dependent panel.
        #[arg(long, default_value_t = 4.0)]
        gain: f64,
        #[arg(long, default_value = "train", value_parser = ["train", "test"])]
        split: String,
    },
    /// Extract a marching-cubes mesh from a grid snapshot.
    Mesh {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Density threshold; defaults to an optical depth of 4 across the
        /// shortest side of the scene box.
        #[arg(long)]
        iso: Option<f64>,
        /// Keep enclosed sub-iso pockets as inner surfaces.
        #[arg(long)]
        keep_cavities: bool,
        /// Score against this mesh at `--tau-edges` voxel edges.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        tau_edges: f64,
    },
    /// Compare analytic gradients with finite differences on random instances.
    CheckGrad {
        #[arg(long, default_value_t = 20)]
        instances: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Write a synthetic dataset with ground-truth depth and mesh.
    Synth {
        #[arg(long, default_value = "ambiguity", value_parser = ["ambiguity", "diffuse"])]
        scene: String,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [r, g, b] if v.iter().all(|c| (0.0..=1.0).contains(c)) => Ok([*r, *g, *b]),
        _ => Err(format!("expected r,g,b in [0, 1], got {s}")),
    }
}

fn load(data: &DataArgs, split: Split) -> Result<Dataset> {
    let opts = LoadOptions {
        split,
        downsample: data.downsample,
        background: data.background,
        ..LoadOptions::default()
    };
    load_dataset_with(&data.data, &opts).with_context(|| format!("loading {} split", split.manifest_name()))
}

fn load_optional(data: &DataArgs, split: Split) -> Option<Dataset> {
    match load(data, split) {
        Ok(d) => Some(d),
        Err(e) => {
            log::warn!("no held-out views: {e:#}");
            None
        }
    }
}

fn config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if run.full_resolution {
        cfg.schedule = cfg.schedule.with_full_resolution();
    }
    if let Some(n) = run.levels {
        cfg.schedule = cfg.schedule.truncated(n);
    }
    cfg.schedule.planes_enabled &= !run.no_planes;
    cfg.schedule.prior_enabled &= !run.no_prior;
    cfg.deterministic |= run.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_result(out: &Path, r: &ReconstructionResult, cfg: &RunConfig) -> Result<()> {
    create_dir(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    write_log(&out.join("log.jsonl"), &r.logs)?;
    r.grid.write_snapshot(&out.join("grid.vxg"))?;
    let planes = out.join("planes");
    create_dir(&planes)?;
    for (i, p) in r.planes.iter().enumerate() {
        p.write_snapshot(&planes.join(format!("{i:03}.dpl")))?;
    }
    let mesh = marching_cubes(&r.grid, &MeshOptions::for_grid(&r.grid))?;
    mesh.write_ply(&out.join("mesh.ply"))?;
    log::info!("wrote {} triangles to mesh.ply", mesh.faces.len());
    Ok(())
}

fn reference_mesh(explicit: Option<&Path>, data: &Path) -> Result<Option<TriMesh>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => data.join("gt_mesh.ply"),
    };
    if !path.exists() {
        if explicit.is_some() {
            bail!("reference mesh {} not found", path.display());
        }
        return Ok(None);
    }
    Ok(Some(TriMesh::read_ply(&path)?))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Reconstruct {
            data,
            run,
            out,
            resume,
            dump_prior,
        } => {
            let cfg = config(&run)?;
            let train = load(&data, Split::Train)?;
            let test = load_optional(&data, Split::Test);
            let opts = RunOptions {
                test: test.as_ref(),
                checkpoint_dir: Some(out.join("checkpoint")),
                resume,
                stop_after_level: None,
            };
            let r = run_with(&train, &cfg, &opts)?;
            write_result(&out, &r, &cfg)?;
            if dump_prior {
                r.weights.write_raw(&out.join("prior_weights.vxw"))?;
            }
            if let Some(last) = r.logs.last() {
                log::info!("final objective {:.6}, held-out PSNR {:?}", last.photometric, last.psnr_heldout);
            }
        }
        Command::Ablate {
            data,
            run,
            out,
            reference,
        } => {
            let cfg = config(&run)?;
            let train = load(&data, Split::Train)?;
            let test = load_optional(&data, Split::Test);
            let reference = reference_mesh(reference.as_deref(), &data.data)?;
            let score = |r: &ReconstructionResult| -> voxrecon::Result<_> {
                let Some(reference) = &reference else {
                    return Ok(None);
                };
                let mesh = marching_cubes(&r.grid, &MeshOptions::for_grid(&r.grid))?;
                Ok(Some(geometry_fscore(&mesh, reference, 2.0 * r.grid.voxel_edge())))
            };
            let report = ablation(&train, test.as_ref(), &cfg, &score)?;
            create_dir(&out)?;
            write_json(&out.join("ablation.json"), &report)?;
            for v in &report {
                println!(
                    "{:<10} F̂ {:>12.4}  PSNR {:>6}  F-score {:>6}  {:>8.1}s",
                    v.variant.name(),
                    v.photometric,
                    v.psnr_heldout.map_or("-".into(), |p| format!("{p:.2}")),
                    v.fscore.as_ref().map_or("-".into(), |f| format!("{:.3}", f.f)),
                    v.wall_clock_s
                );
            }
        }
        Command::Render {
            data,
            run,
            out,
            gain,
            split,
        } => {
            let label = split;
            let split = if label == "test" { Split::Test } else { Split::Train };
            let grid = VoxelGrid::read_snapshot(&run.join("grid.vxg"))?;
            let cfg = RunConfig::load(&run.join("config.toml"))?;
            let dataset = load(&data, split)?;
            let step = cfg.step_factor * grid.voxel_edge();
            create_dir(&out)?;
            for (i, view) in dataset.views.iter().enumerate() {
                let stem = format!("{label}_{i:03}");
                let plane_path = run.join("planes").join(format!("{i:03}.dpl"));
                let plane = if split == Split::Train && plane_path.exists() {
                    let p = DifferencePlane::read_snapshot(&plane_path)?;
                    Some(p.upsample(view.width(), view.height())?)
                } else {
                    None
                };
                if plane.is_none() {
                    let img = render_image(&grid, view, step, None, dataset.background)?;
                    write_png(&out.join(format!("{stem}_lambertian.png")), &img.color)?;
                    continue;
                }
                let d = render_decomposition(&grid, view, plane.as_ref(), step, None, dataset.background, gain)?;
                write_decomposition(&out, &stem, &d, gain)?;
            }
            write_json(
                &out.join("render.json"),
                &json!({
                    "view_dependent_encoding": "0.5 + x / 2, clamped to [0, 1], no sRGB curve",
                    "gain": gain,
                    "views": dataset.views.len(),
                }),
            )?;
        }
        Command::Mesh {
            grid,
            out,
            iso,
            keep_cavities,
            reference,
            tau_edges,
        } => {
            let grid = VoxelGrid::read_snapshot(&grid)?;
            let iso = iso.unwrap_or_else(|| default_iso(&grid));
            let mesh = marching_cubes(
                &grid,
                &MeshOptions {
                    iso,
                    fill_cavities: !keep_cavities,
                },
            )?;
            mesh.write_ply(&out)?;
            println!("{} vertices, {} triangles", mesh.vertices.len(), mesh.faces.len());
            if let Some(r) = reference {
                let reference = TriMesh::read_ply(&r)?;
                let f = geometry_fscore(&mesh, &reference, tau_edges * grid.voxel_edge());
                println!("{}", serde_json::to_string(&f)?);
            }
        }
        Command::CheckGrad { instances, seed, eps } => {
            let mut worst: f64 = 0.0;
            for k in 0..instances {
                let inst = random_instance(seed + k);
                let mut objective = Objective::new(&inst.views, &inst.weights, 0.05);
                objective.sparsity = Some(0.1);
                let report = check_gradients(&objective, &inst.grid, &inst.planes, eps)?;
                println!("{}", serde_json::to_string(&report)?);
                worst = worst.max(report.max_rel_error);
            }
            println!("max relative error {worst:.3e}");
            if worst >= 1e-4 {
                bail!("gradient check failed");
            }
        }
        Command::Synth { scene, size, out } => {
            let scene = match scene.as_str() {
                "diffuse" => synth::diffuse_sphere(),
                _ => synth::ambiguity_case(),
            };
            let data = synth::generate(&scene, size, size)?;
            data.write(&out)?;
            println!(
                "wrote {} train and {} test views to {}",
                data.train.views.len(),
                data.test.views.len(),
                out.display()
            );
        }
    }
    Ok(())
}
