//! Emission-absorption raymarching over the canonical or the posed field.

use alloc::vec;
use alloc::vec::Vec;

use glam::DVec3;
use rand::Rng;

use crate::camera::{ray_box, Camera, Ray};
use crate::field::{BoundingBox, FactorizedField};
use crate::skinning::{
    inverse_warp, pose_mesh, BoneAffines, NearestVertexIndex, Pose, PosedMesh, Skeleton, SkinnedTemplate,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("density at sample {0} is not a number")]
    NanDensity(usize),
}

/// Samples along one ray, separated by `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub positions: Vec<DVec3>,
    pub step: f64,
}

/// Stratified samples on `[t_near, t_far]`: midpoints, or one uniform draw per
/// stratum when an RNG is supplied.
pub fn sample_ray<R: Rng + ?Sized>(ray: &Ray, t_near: f64, t_far: f64, n: usize, jitter: Option<&mut R>) -> RaySamples {
    let step = (t_far - t_near) / n as f64;
    let t: Vec<f64> = match jitter {
        None => (0..n).map(|i| t_near + (i as f64 + 0.5) * step).collect(),
        Some(rng) => (0..n).map(|i| t_near + (i as f64 + rng.gen::<f64>()) * step).collect(),
    };
    let positions = t.iter().map(|t| ray.at(*t)).collect();
    RaySamples { t, positions, step }
}

/// Emission-absorption accumulation of one ray (no background).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    /// `1 - T_N`
    pub opacity: f64,
    /// `Σ (T_i - T_{i+1}) t_i`
    pub depth: f64,
}

/// Accumulates `(T_i - T_{i+1})`-weighted colors and depths.
pub fn composite(sigmas: &[f64], colors: &[[f64; 3]], step: f64, ts: &[f64]) -> Result<Composite, RenderError> {
    let mut trans = 1.0;
    let mut out = Composite { color: [0.0; 3], opacity: 0.0, depth: 0.0 };
    for (i, (&s, c)) in sigmas.iter().zip(colors).enumerate() {
        if s.is_nan() {
            return Err(RenderError::NanDensity(i));
        }
        let next = trans * libm::exp(-step * s);
        let w = trans - next;
        for k in 0..3 {
            out.color[k] += w * c[k];
        }
        out.depth += w * ts.get(i).copied().unwrap_or(0.0);
        trans = next;
    }
    out.opacity = 1.0 - trans;
    Ok(out)
}

/// Per-sample weights `T_i - T_{i+1}` and the transmittances `T_0..=T_N`.
pub fn transmittance(sigmas: &[f64], step: f64) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::with_capacity(sigmas.len() + 1);
    let mut w = Vec::with_capacity(sigmas.len());
    let mut cur = 1.0;
    t.push(cur);
    for s in sigmas {
        let next = cur * libm::exp(-step * s);
        w.push(cur - next);
        t.push(next);
        cur = next;
    }
    (w, t)
}

/// Backward pass of `color + T_N·background` w.r.t. densities and colors.
pub fn composite_backward(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    step: f64,
    background: [f64; 3],
    d_color: [f64; 3],
    d_sigma: &mut [f64],
    d_colors: &mut [[f64; 3]],
) {
    let n = sigmas.len();
    let (w, t) = transmittance(sigmas, step);
    // suffix = Σ_{j>i} w_j c_j + T_N·bg, projected on d_color
    let mut suffix = t[n] * (0..3).map(|k| background[k] * d_color[k]).sum::<f64>();
    for i in (0..n).rev() {
        let c_dot = (0..3).map(|k| colors[i][k] * d_color[k]).sum::<f64>();
        d_sigma[i] = step * (t[i + 1] * c_dot - suffix);
        for k in 0..3 {
            d_colors[i][k] = w[i] * d_color[k];
        }
        suffix += w[i] * c_dot;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Samples across each ray's box intersection.
    pub n_samples: usize,
    pub background: [f64; 3],
    /// Inverse-warp validity radius.
    pub tau: f64,
}

impl RenderConfig {
    /// Nominal step for a box: diagonal over the sample count. The field's
    /// softplus gain is the reciprocal of this.
    pub fn nominal_step(&self, bbox: &BoundingBox) -> f64 {
        bbox.diagonal() / self.n_samples as f64
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { n_samples: 128, background: [0.0; 3], tau: 0.1 }
    }
}

/// Final per-ray output with the background composited in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayResult {
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
}

impl RayResult {
    fn background(bg: [f64; 3]) -> Self {
        Self { color: bg, opacity: 0.0, depth: 0.0 }
    }

    fn from_composite(c: Composite, bg: [f64; 3]) -> Self {
        let t = 1.0 - c.opacity;
        Self { color: [0, 1, 2].map(|k| c.color[k] + t * bg[k]), opacity: c.opacity, depth: c.depth }
    }
}

/// Color, depth and opacity images, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub color: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
    pub opacity: Vec<f32>,
}

impl RenderOutput {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, color: vec![[0.0; 3]; n], depth: vec![0.0; n], opacity: vec![0.0; n] }
    }

    pub fn set(&mut self, i: usize, r: &RayResult) {
        self.color[i] = r.color.map(|c| c as f32);
        self.depth[i] = r.depth as f32;
        self.opacity[i] = r.opacity as f32;
    }

    pub fn from_rays(camera: &Camera, mut f: impl FnMut(&Ray) -> RayResult) -> Self {
        let mut out = Self::new(camera.width, camera.height);
        for py in 0..camera.height {
            for px in 0..camera.width {
                let i = (py * camera.width + px) as usize;
                out.set(i, &f(&camera.pixel_ray(px, py)));
            }
        }
        out
    }
}

/// Template posed for one frame, with its nearest-vertex index.
#[derive(Debug, Clone)]
pub struct PosedScene {
    pub affines: BoneAffines,
    pub posed: PosedMesh,
    pub index: NearestVertexIndex,
    /// Posed vertex bounds dilated by `tau`.
    pub bbox: BoundingBox,
    pub tau: f64,
}

impl PosedScene {
    pub fn new(template: &SkinnedTemplate, skeleton: &Skeleton, pose: &Pose, tau: f64) -> Self {
        Self::from_affines(template, skeleton.bone_affines(pose), tau)
    }

    pub fn from_affines(template: &SkinnedTemplate, affines: BoneAffines, tau: f64) -> Self {
        let posed = pose_mesh(template, &affines);
        let index = NearestVertexIndex::build(&posed.vertices, tau).expect("template has vertices");
        let bbox = BoundingBox::around(posed.vertices.iter().copied())
            .unwrap_or_else(|| {
                let p = posed.vertices[0];
                BoundingBox::from_corners(p, p + DVec3::splat(1e-6)).unwrap()
            })
            .dilate(tau);
        Self { affines, posed, index, bbox, tau }
    }
}

fn march<F>(ray: &Ray, bbox: &BoundingBox, cfg: &RenderConfig, mut eval: F) -> RayResult
where
    F: FnMut(DVec3) -> (f64, [f64; 3]),
{
    let Some((t0, t1)) = ray_box(ray, bbox) else {
        return RayResult::background(cfg.background);
    };
    let n = cfg.n_samples;
    let step = (t1 - t0) / n as f64;
    let mut trans = 1.0;
    let mut acc = Composite { color: [0.0; 3], opacity: 0.0, depth: 0.0 };
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * step;
        let (sigma, c) = eval(ray.at(t));
        if sigma <= 0.0 {
            continue;
        }
        let next = trans * libm::exp(-step * sigma);
        let w = trans - next;
        for k in 0..3 {
            acc.color[k] += w * c[k];
        }
        acc.depth += w * t;
        trans = next;
    }
    acc.opacity = 1.0 - trans;
    RayResult::from_composite(acc, cfg.background)
}

/// Canonical-space render of one ray over the whole field box.
pub fn march_canonical(field: &FactorizedField, ray: &Ray, cfg: &RenderConfig) -> RayResult {
    march(ray, field.bbox(), cfg, |x| match field.grid_point(x) {
        Some(p) => {
            let s = field.sample_at(&p);
            (s.sigma, s.rgb)
        }
        None => (0.0, [0.0; 3]),
    })
}

/// Posed render of one ray: samples beyond `tau` of every posed vertex carry
/// no density.
pub fn march_deformed(field: &FactorizedField, scene: &PosedScene, ray: &Ray, cfg: &RenderConfig) -> RayResult {
    march(ray, &scene.bbox, cfg, |x| match inverse_warp(x, &scene.posed, &scene.index, scene.tau) {
        Some(w) => match field.grid_point(w.canonical) {
            Some(p) => {
                let s = field.sample_at(&p);
                (s.sigma, s.rgb)
            }
            None => (0.0, [0.0; 3]),
        },
        None => (0.0, [0.0; 3]),
    })
}

/// Renders the listed pixels of `camera` in posed space.
pub fn render_deformed(
    field: &FactorizedField,
    scene: &PosedScene,
    camera: &Camera,
    pixels: &[(u32, u32)],
    cfg: &RenderConfig,
) -> Vec<RayResult> {
    pixels.iter().map(|(x, y)| march_deformed(field, scene, &camera.pixel_ray(*x, *y), cfg)).collect()
}

/// Renders the listed pixels of `camera` in canonical space.
pub fn render_canonical(field: &FactorizedField, camera: &Camera, pixels: &[(u32, u32)], cfg: &RenderConfig) -> Vec<RayResult> {
    pixels.iter().map(|(x, y)| march_canonical(field, &camera.pixel_ray(*x, *y), cfg)).collect()
}

pub fn render_deformed_image(field: &FactorizedField, scene: &PosedScene, camera: &Camera, cfg: &RenderConfig) -> RenderOutput {
    RenderOutput::from_rays(camera, |r| march_deformed(field, scene, r, cfg))
}

pub fn render_canonical_image(field: &FactorizedField, camera: &Camera, cfg: &RenderConfig) -> RenderOutput {
    RenderOutput::from_rays(camera, |r| march_canonical(field, r, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_sample_composite() {
        let c = composite(&[LN_2, LN_2], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 1.0, &[0.0, 1.0]).unwrap();
        assert!((c.color[0] - 0.5).abs() < 1e-12);
        assert!((c.color[1] - 0.25).abs() < 1e-12);
        assert_eq!(c.color[2], 0.0);
        assert!((c.opacity - 0.75).abs() < 1e-12);
    }

    #[test]
    fn transparent_and_opaque() {
        let c = composite(&[0.0; 4], &[[1.0; 3]; 4], 0.5, &[0.0; 4]).unwrap();
        assert_eq!((c.color, c.opacity), ([0.0; 3], 0.0));
        let c = composite(&[50.0, 1.0], &[[0.2, 0.4, 0.6], [1.0; 3]], 1.0, &[3.0, 4.0]).unwrap();
        assert!((c.color[1] - 0.4).abs() < 1e-12 && (c.opacity - 1.0).abs() < 1e-12 && (c.depth - 3.0).abs() < 1e-12);
        assert_eq!(composite(&[f64::NAN], &[[0.0; 3]], 1.0, &[0.0]), Err(RenderError::NanDensity(0)));
    }

    #[test]
    fn sample_ray_strata() {
        let r = Ray { origin: DVec3::ZERO, direction: DVec3::X };
        let s = sample_ray::<ChaCha8Rng>(&r, 0.0, 4.0, 4, None);
        assert_eq!(s.t, vec![0.5, 1.5, 2.5, 3.5]);
        assert_eq!(s.step, 1.0);
        let one = sample_ray::<ChaCha8Rng>(&r, 2.0, 3.0, 1, None);
        assert_eq!(one.t, vec![2.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let j = sample_ray(&r, 0.0, 4.0, 4, Some(&mut rng));
        for (i, t) in j.t.iter().enumerate() {
            assert!(*t >= i as f64 && *t < i as f64 + 1.0);
        }
    }

    #[test]
    fn weights_telescope() {
        let sig = [0.3, 2.0, 0.0, 5.0, 0.7];
        let (w, t) = transmittance(&sig, 0.2);
        let s: f64 = w.iter().sum();
        assert!((s - (1.0 - t[5])).abs() < 1e-12);
        assert!(t.windows(2).all(|p| p[1] <= p[0]));
    }
}
