//! Row-parallel wrappers over the core renderers, orbit cameras, image
//! metrics and the full-vs-local benchmark.

use std::time::Instant;

use glam::DVec3;
use rayon::prelude::*;
use serde::Serialize;
use skinfield_core::camera::Camera;
use skinfield_core::field::{BoundingBox, FactorizedField};
use skinfield_core::local_render::{LocalMarchConfig, PosedSurface};
use skinfield_core::math::psnr;
use skinfield_core::raymarch::{march_deformed, PosedScene, RayResult, RenderConfig, RenderOutput};
use skinfield_core::skinning::{BoneAffines, Pose, Skeleton, SkinnedTemplate};

fn by_rows(camera: &Camera, f: impl Fn(u32, u32) -> RayResult + Sync) -> RenderOutput {
    let w = camera.width;
    let rows: Vec<Vec<RayResult>> = (0..camera.height).into_par_iter().map(|y| (0..w).map(|x| f(x, y)).collect()).collect();
    let mut out = RenderOutput::new(camera.width, camera.height);
    for (i, r) in rows.iter().flatten().enumerate() {
        out.set(i, r);
    }
    out
}

/// Full raymarch; identical to the serial core renderer pixel for pixel.
pub fn render_full(field: &FactorizedField, scene: &PosedScene, camera: &Camera, cfg: &RenderConfig) -> RenderOutput {
    by_rows(camera, |x, y| march_deformed(field, scene, &camera.pixel_ray(x, y), cfg))
}

/// Rasterization-guided local render; identical to the serial core renderer.
pub fn render_local(
    field: &FactorizedField,
    mesh: &SkinnedTemplate,
    affines: &BoneAffines,
    camera: &Camera,
    cfg: &LocalMarchConfig,
) -> RenderOutput {
    let surface = PosedSurface::new(mesh, affines);
    let fb = surface.rasterize(camera);
    let bg = RayResult { color: cfg.background, opacity: 0.0, depth: 0.0 };
    by_rows(camera, |x, y| match &fb.fragments[(y * camera.width + x) as usize] {
        Some(f) => surface.shade(f, camera, field, cfg),
        None => bg,
    })
}

/// Camera on a sphere around `bbox` at azimuth/elevation in degrees, with a
/// 40° vertical field of view and the box filling about 90% of the frame.
pub fn orbit_camera(bbox: &BoundingBox, azimuth_deg: f64, elevation_deg: f64, width: u32, height: u32) -> Camera {
    let fov = 40f64.to_radians();
    let dist = 1.1 * 0.5 * bbox.diagonal() / (0.5 * fov).sin();
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let dir = DVec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
    Camera::look_at(bbox.center() + dist * dir, bbox.center(), DVec3::Y, fov, width, height)
}

pub fn mse(a: &[[f32; 3]], b: &[[f32; 3]]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum::<f64>()).sum();
    s / (3 * a.len()) as f64
}

pub fn image_psnr(a: &RenderOutput, b: &RenderOutput) -> f64 {
    psnr(mse(&a.color, &b.color))
}

/// Machine-readable benchmark record.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub resolution: u32,
    pub frames: usize,
    pub n_samples: usize,
    pub n_local: usize,
    pub ms_full: f64,
    pub ms_local: f64,
    pub speedup: f64,
    pub psnr: f64,
}

impl BenchReport {
    pub fn text(&self) -> String {
        format!(
            "resolution {0}x{0}, {1} frames\nfull raymarch  {2:.1} ms/frame ({3} samples)\nlocal render   {4:.1} ms/frame ({5} samples)\nspeedup        {6:.2}x\npsnr local vs full {7:.2} dB",
            self.resolution, self.frames, self.ms_full, self.n_samples, self.ms_local, self.n_local, self.speedup, self.psnr
        )
    }
}

pub struct BenchScene<'a> {
    pub field: &'a FactorizedField,
    pub template: &'a SkinnedTemplate,
    pub mesh: &'a SkinnedTemplate,
    pub skeleton: &'a Skeleton,
    pub poses: &'a [Pose],
    pub render: RenderConfig,
    pub local: LocalMarchConfig,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `frames` full and local renders cycling through the poses after
/// `warmup` untimed frames of each; reports medians. Posing is included in
/// both timings.
pub fn bench(scene: &BenchScene, camera: &Camera, frames: usize, warmup: usize) -> BenchReport {
    let mut full_ms = Vec::new();
    let mut local_ms = Vec::new();
    let mut quality = None;
    for k in 0..warmup + frames {
        let pose = &scene.poses[k % scene.poses.len()];
        let t = Instant::now();
        let posed = PosedScene::new(scene.template, scene.skeleton, pose, scene.render.tau);
        let full = render_full(scene.field, &posed, camera, &scene.render);
        let t_full = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let affines = scene.skeleton.bone_affines(pose);
        let local = render_local(scene.field, scene.mesh, &affines, camera, &scene.local);
        let t_local = t.elapsed().as_secs_f64() * 1e3;
        if k >= warmup {
            full_ms.push(t_full);
            local_ms.push(t_local);
            quality.get_or_insert_with(|| image_psnr(&local, &full));
        }
    }
    let (ms_full, ms_local) = (median(full_ms), median(local_ms));
    BenchReport {
        resolution: camera.width,
        frames,
        n_samples: scene.render.n_samples,
        n_local: scene.local.n_local,
        ms_full,
        ms_local,
        speedup: ms_full / ms_local,
        psnr: quality.unwrap_or(f64::NAN),
    }
}
