//! Command-line interface.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use skinfield_core::camera::Camera;
use skinfield_core::extract::{ExtractConfig, ExtractError};
use skinfield_core::field::BoundingBox;
use skinfield_core::raymarch::PosedScene;
use skinfield_core::skinning::{Pose, SkinnedTemplate};
use skinfield_core::synth::{SceneSpec, SynthError, GT_SAMPLES};
use skinfield_core::trainer::{fit_with, FitEvent, TrainConfig, TrainError};

use crate::assets::{AssetContainer, AssetError};
use crate::config::{self, ConfigError};
use crate::dataset::{read_dataset, read_json, write_dataset, CameraJson, DatasetError, PoseJson};
use crate::image_io::save_rgb;
use crate::obj::to_obj;
use crate::pipeline::{checkpoint, extract_mesh, info, pin_tau, synth_dataset};
use crate::render::{bench, orbit_camera, render_full, render_local, BenchScene};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Asset { path: PathBuf, source: AssetError },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("synth: {0}")]
    Synth(#[from] SynthError),
    #[error("mesh extraction: {0}")]
    Extract(#[from] ExtractError),
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{0}: no mesh section (run `skinfield mesh` first)")]
    NoMesh(PathBuf),
    #[error("{0}: no template section")]
    NoTemplate(PathBuf),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Asset { .. } => "asset",
            CliError::Dataset(_) => "dataset",
            CliError::Config(_) => "config",
            CliError::Train(_) => "train",
            CliError::Synth(_) => "synth",
            CliError::Extract(_) => "extract",
            CliError::Image { .. } => "image",
            CliError::NoMesh(_) => "no_mesh",
            CliError::NoTemplate(_) => "no_template",
            CliError::Usage(_) => "usage",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        json!({ "error": self.code(), "message": self.to_string() }).to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "skinfield", version, about = "Fit, extract, render and export skinned factorized radiance fields")]
pub struct Cli {
    /// Worker threads for rendering; defaults to all cores. Training is
    /// single-threaded.
    #[arg(long, global = true, env = "SKINFIELD_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic articulated capsule dataset.
    Synth(SynthArgs),
    /// Fit a field to a dataset and write a checkpoint.
    Fit(FitArgs),
    /// Render a frame or pose with the full raymarcher.
    Render(RenderArgs),
    /// Extract and rig a surface mesh, storing it in the checkpoint.
    Mesh(MeshArgs),
    /// Render a frame or pose with the mesh-guided real-time renderer.
    RenderRt(RenderArgs),
    /// Write a viewer asset from a checkpoint with a mesh.
    Export(ExportArgs),
    /// Time the full and real-time renderers on an asset.
    Bench(BenchArgs),
    /// Summarize a checkpoint or asset.
    Info(InfoArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Bones in the chain (1 to 8).
    #[arg(long, default_value_t = 2)]
    pub bones: usize,
    /// Keyframes, one camera each.
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 200)]
    pub size: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples per ray for the ground-truth renders.
    #[arg(long, default_value_t = GT_SAMPLES)]
    pub gt_samples: usize,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides applied after the file, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// NDJSON training log; defaults to the checkpoint path with `.ndjson`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    /// Animation frame to render; ignored with `--pose`.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Pose JSON file (`rotations`, `root_translation`).
    #[arg(long)]
    pub pose: Option<PathBuf>,
    /// Orbit camera as `AZIMUTH,ELEVATION` in degrees around the posed subject.
    #[arg(long, default_value = "30,15")]
    pub camera: String,
    /// Dataset `cameras.json`; with `--view`, replaces the orbit camera.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Index into `--cameras`.
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    /// Square output size for orbit cameras.
    #[arg(long, default_value_t = 512)]
    pub size: u32,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub view: ViewArgs,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Turntable views per elevation ring.
    #[arg(long, default_value_t = 18)]
    pub views: usize,
    /// Face budget after simplification.
    #[arg(long, default_value_t = 15_000)]
    pub faces: usize,
    /// Marching-cubes lattice nodes along the longest side.
    #[arg(long, default_value_t = 192)]
    pub resolution: usize,
    /// Turntable image size.
    #[arg(long, default_value_t = 128)]
    pub image_size: u32,
    /// Output checkpoint; defaults to updating `--checkpoint` in place.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the rigged mesh as OBJ with field colors.
    #[arg(long)]
    pub obj: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub asset: PathBuf,
    /// Square output size.
    #[arg(long, default_value_t = 512)]
    pub resolution: u32,
    /// Timed frames per renderer.
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    /// Untimed frames before timing.
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Write the JSON record here as well as to stdout.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub asset: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub fn load_asset(path: &Path) -> Result<AssetContainer, CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    AssetContainer::from_bytes(&bytes).map_err(|source| CliError::Asset { path: path.to_path_buf(), source })
}

fn save_asset(asset: &AssetContainer, path: &Path) -> Result<(), CliError> {
    asset.save(path).map_err(|source| CliError::Asset { path: path.to_path_buf(), source })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Render(a) => cmd_render(&a, false),
        Command::RenderRt(a) => cmd_render(&a, true),
        Command::Mesh(a) => cmd_mesh(&a),
        Command::Export(a) => cmd_export(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Info(a) => cmd_info(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.gt_samples == 0 {
        return Err(CliError::Usage("--gt-samples must be positive".into()));
    }
    let spec = SceneSpec::new(a.bones, a.frames, a.size, a.seed);
    let (_, data) = synth_dataset(&spec, a.gt_samples)?;
    write_dataset(&a.out, &data)?;
    Ok(())
}

/// Training configuration from an optional file plus overrides.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = file {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        config::apply(&mut cfg, &text, &p.display().to_string())?;
    }
    for (i, o) in overrides.iter().enumerate() {
        config::apply(&mut cfg, o, &format!("--set #{}", i + 1))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_fit(a: &FitArgs) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let data = read_dataset(&a.data)?;
    pin_tau(&mut cfg, &data);
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("ndjson"));
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let start = Instant::now();
    let mut log_err = None;
    let mut emit = |v: serde_json::Value| {
        if log_err.is_none() {
            if let Err(e) = writeln!(log, "{v}") {
                log_err = Some(e);
            }
        }
    };
    let fit = fit_with(&data, cfg, |ev| {
        let wall_s = start.elapsed().as_secs_f64();
        match ev {
            FitEvent::Step(r) => emit(json!({
                "event": "step", "iteration": r.iteration, "alpha": r.schedule.alpha, "beta": r.schedule.beta,
                "gamma": r.schedule.gamma, "l_rgb": r.l_rgb, "l_sparse": r.l_sparse,
                "l_perceptual": r.l_perceptual, "total": r.total, "wall_s": wall_s,
            })),
            FitEvent::Upsampled { iteration, dims } => emit(json!({
                "event": "upsample", "iteration": iteration, "dims": [dims.d, dims.h, dims.w], "wall_s": wall_s,
            })),
            FitEvent::Epoch { summary, .. } => emit(json!({
                "event": "epoch", "epoch": summary.epoch, "mean_rgb": summary.mean_rgb,
                "mean_total": summary.mean_total, "wall_s": wall_s,
            })),
        }
    })?;
    if let Some(e) = log_err {
        return Err(CliError::Io { path: log_path, source: e });
    }
    log.flush().map_err(io_err(&log_path))?;
    save_asset(&checkpoint(&data, &fit), &a.out)
}

fn parse_orbit(spec: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Usage(format!("--camera: expected AZIMUTH,ELEVATION in degrees, got {spec:?}"));
    let (az, el) = spec.split_once(',').ok_or_else(bad)?;
    let az: f64 = az.trim().parse().map_err(|_| bad())?;
    let el: f64 = el.trim().parse().map_err(|_| bad())?;
    if !(az.is_finite() && el.is_finite() && el.abs() < 90.0) {
        return Err(bad());
    }
    Ok((az, el))
}

fn resolve_pose(asset: &AssetContainer, v: &ViewArgs) -> Result<Pose, CliError> {
    let pose = match &v.pose {
        Some(p) => Pose::from(read_json::<PoseJson>(p)?),
        None if asset.animation.is_empty() => asset.skeleton.rest_pose().clone(),
        None => asset
            .animation
            .get(v.frame)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("--frame {} outside 0..{}", v.frame, asset.animation.len())))?,
    };
    asset.skeleton.check_pose(&pose).map_err(|e| CliError::Usage(format!("pose: {e}")))?;
    Ok(pose)
}

/// Subject bounds in a pose: the posed warp template (or mesh) dilated by tau.
pub fn posed_bounds(asset: &AssetContainer, pose: &Pose) -> BoundingBox {
    let t = asset.template.as_ref().or(asset.mesh.as_ref()).expect("caller checked for a mesh");
    PosedScene::new(t, &asset.skeleton, pose, asset.tau as f64).bbox
}

fn resolve_camera(asset: &AssetContainer, pose: &Pose, v: &ViewArgs) -> Result<Camera, CliError> {
    if let Some(p) = &v.cameras {
        let cams: Vec<CameraJson> = read_json(p)?;
        let c = cams.get(v.view).ok_or_else(|| CliError::Usage(format!("--view {} outside 0..{}", v.view, cams.len())))?;
        return c.to_camera().map_err(|m| CliError::Usage(format!("{}: {m}", p.display())));
    }
    let (az, el) = parse_orbit(&v.camera)?;
    if v.size == 0 {
        return Err(CliError::Usage("--size must be positive".into()));
    }
    Ok(orbit_camera(&posed_bounds(asset, pose), az, el, v.size, v.size))
}

pub fn cmd_render(a: &RenderArgs, realtime: bool) -> Result<(), CliError> {
    let asset = load_asset(&a.checkpoint)?;
    let out = if realtime {
        let mesh = asset.mesh.as_ref().ok_or_else(|| CliError::NoMesh(a.checkpoint.clone()))?;
        let pose = resolve_pose(&asset, &a.view)?;
        let camera = resolve_camera(&asset, &pose, &a.view)?;
        render_local(&asset.field, mesh, &asset.skeleton.bone_affines(&pose), &camera, &asset.local_config())
    } else {
        let template = asset.template.as_ref().ok_or_else(|| CliError::NoTemplate(a.checkpoint.clone()))?;
        let pose = resolve_pose(&asset, &a.view)?;
        let camera = resolve_camera(&asset, &pose, &a.view)?;
        let scene = PosedScene::new(template, &asset.skeleton, &pose, asset.tau as f64);
        render_full(&asset.field, &scene, &camera, &asset.render_config())
    };
    save_rgb(&a.out, out.width, out.height, &out.color).map_err(|message| CliError::Image { path: a.out.clone(), message })
}

pub fn cmd_mesh(a: &MeshArgs) -> Result<(), CliError> {
    let mut asset = load_asset(&a.checkpoint)?;
    if asset.template.is_none() {
        return Err(CliError::NoTemplate(a.checkpoint.clone()));
    }
    if a.views == 0 || a.faces == 0 || a.resolution < 2 || a.image_size == 0 {
        return Err(CliError::Usage("--views, --faces, --image-size must be positive and --resolution at least 2".into()));
    }
    let cfg = ExtractConfig {
        views_per_ring: a.views,
        image_size: a.image_size,
        render: asset.render_config(),
        resolution: a.resolution,
        target_faces: a.faces,
        ..ExtractConfig::default()
    };
    let ex = extract_mesh(&asset, &cfg)?;
    let rigged: SkinnedTemplate = ex.rigged;
    if let Some(p) = &a.obj {
        let colors = skinfield_core::extract::vertex_colors(&asset.field, &ex.simplified);
        std::fs::write(p, to_obj(&rigged, Some(&colors))).map_err(io_err(p))?;
    }
    asset.mesh = Some(rigged);
    save_asset(&asset, a.out.as_deref().unwrap_or(&a.checkpoint))
}

pub fn cmd_export(a: &ExportArgs) -> Result<(), CliError> {
    let asset = load_asset(&a.checkpoint)?;
    if asset.mesh.is_none() {
        return Err(CliError::NoMesh(a.checkpoint.clone()));
    }
    save_asset(&asset, &a.out)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let asset = load_asset(&a.asset)?;
    let mesh = asset.mesh.as_ref().ok_or_else(|| CliError::NoMesh(a.asset.clone()))?;
    let template = asset.template.as_ref().ok_or_else(|| CliError::NoTemplate(a.asset.clone()))?;
    if a.frames == 0 || a.resolution == 0 {
        return Err(CliError::Usage("--frames and --resolution must be positive".into()));
    }
    let rest = [asset.skeleton.rest_pose().clone()];
    let poses = if asset.animation.is_empty() { &rest[..] } else { &asset.animation[..] };
    let bounds = poses.iter().map(|p| posed_bounds(&asset, p)).reduce(|a, b| a.union(&b)).expect("at least one pose");
    let camera = orbit_camera(&bounds, 30.0, 15.0, a.resolution, a.resolution);
    let scene = BenchScene {
        field: &asset.field,
        template,
        mesh,
        skeleton: &asset.skeleton,
        poses,
        render: asset.render_config(),
        local: asset.local_config(),
    };
    let report = bench(&scene, &camera, a.frames, a.warmup);
    let record = serde_json::to_string(&report).expect("plain struct");
    if let Some(p) = &a.json {
        std::fs::write(p, &record).map_err(io_err(p))?;
    }
    println!("{}", report.text());
    println!("{record}");
    Ok(())
}

pub fn cmd_info(a: &InfoArgs) -> Result<(), CliError> {
    let i = info(&load_asset(&a.asset)?);
    if a.json {
        println!("{}", serde_json::to_string(&i).expect("plain struct"));
    } else {
        println!("{}", i.text());
    }
    Ok(())
}
