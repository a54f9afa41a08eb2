//! Rasterization-guided local raymarching: the posed mesh is rasterized, each
//! fragment's inverse skinning affine is interpolated from its face's
//! vertices, and a short emission-absorption march around the hit point
//! produces the pixel color.

use alloc::vec::Vec;

use glam::{DAffine3, DMat3, DVec3};

use crate::camera::{Camera, Ray};
use crate::field::FactorizedField;
use crate::raster::{rasterize, Fragment, Framebuffer};
use crate::raymarch::{RayResult, RenderOutput};
use crate::skinning::{pose_mesh, BoneAffines, PosedMesh, SkinnedTemplate};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMarchConfig {
    pub n_local: usize,
    /// Half-width of the marched segment around the surface hit.
    pub half_width: f64,
    pub background: [f64; 3],
}

impl LocalMarchConfig {
    /// Defaults for a given inverse-warp radius: 16 samples over `±tau/2`.
    pub fn for_tau(tau: f64) -> Self {
        Self { n_local: 16, half_width: 0.5 * tau, background: [0.0; 3] }
    }
}

/// Color and residual transmittance of one local march.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalResult {
    pub color: [f64; 3],
    pub transmittance: f64,
}

/// `Σ α_i A_i⁻¹`, entrywise on the 3×4 matrices.
pub fn interpolate_inverse(bary: [f64; 3], face: [u32; 3], inverses: &[DAffine3]) -> DAffine3 {
    let mut m = DMat3::ZERO;
    let mut t = DVec3::ZERO;
    for k in 0..3 {
        let a = &inverses[face[k] as usize];
        m += a.matrix3 * bary[k];
        t += a.translation * bary[k];
    }
    DAffine3::from_mat3_translation(m, t)
}

/// Marches `n_local` midpoint samples on `[t_hit - s, t_hit + s]`, mapping
/// every sample to canonical space with the same inverse affine.
pub fn local_march(ray: &Ray, t_hit: f64, inverse: &DAffine3, field: &FactorizedField, cfg: &LocalMarchConfig) -> LocalResult {
    let n = cfg.n_local;
    let step = 2.0 * cfg.half_width / n as f64;
    let t0 = t_hit - cfg.half_width;
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * step;
        if t <= 0.0 {
            continue;
        }
        let Some(p) = field.grid_point(inverse.transform_point3(ray.at(t))) else { continue };
        let s = field.sample_at(&p);
        if s.sigma <= 0.0 {
            continue;
        }
        let next = trans * libm::exp(-step * s.sigma);
        let w = trans - next;
        for k in 0..3 {
            color[k] += w * s.rgb[k];
        }
        trans = next;
    }
    LocalResult { color, transmittance: trans }
}

/// Posed mesh ready for real-time rendering.
#[derive(Debug, Clone)]
pub struct PosedSurface {
    pub posed: PosedMesh,
    pub faces: Vec<[u32; 3]>,
}

impl PosedSurface {
    pub fn new(mesh: &SkinnedTemplate, affines: &BoneAffines) -> Self {
        Self { posed: pose_mesh(mesh, affines), faces: mesh.faces.clone() }
    }

    pub fn rasterize(&self, camera: &Camera) -> Framebuffer {
        rasterize(&self.posed.vertices, &self.faces, camera)
    }

    /// Shades one fragment; the residual transmittance goes to the background.
    pub fn shade(&self, frag: &Fragment, camera: &Camera, field: &FactorizedField, cfg: &LocalMarchConfig) -> RayResult {
        let ray = camera.pixel_ray(frag.px, frag.py);
        let hit = frag.point(&self.posed.vertices, &self.faces);
        let t_hit = (hit - ray.origin).dot(ray.direction);
        let inv = interpolate_inverse(frag.bary, self.faces[frag.face as usize], &self.posed.inverse);
        let r = local_march(&ray, t_hit, &inv, field, cfg);
        RayResult {
            color: [0, 1, 2].map(|k| r.color[k] + r.transmittance * cfg.background[k]),
            opacity: 1.0 - r.transmittance,
            depth: t_hit,
        }
    }
}

/// Full real-time path for one frame: pose, rasterize, shade fragments.
pub fn render_realtime(
    field: &FactorizedField,
    mesh: &SkinnedTemplate,
    affines: &BoneAffines,
    camera: &Camera,
    cfg: &LocalMarchConfig,
) -> RenderOutput {
    let surface = PosedSurface::new(mesh, affines);
    let fb = surface.rasterize(camera);
    let mut out = RenderOutput::new(camera.width, camera.height);
    let bg = RayResult { color: cfg.background, opacity: 0.0, depth: 0.0 };
    for (i, frag) in fb.fragments.iter().enumerate() {
        match frag {
            Some(f) => out.set(i, &surface.shade(f, camera, field, cfg)),
            None => out.set(i, &bg),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{BoundingBox, FactorGroup, GridDims};

    fn slab_field(plane: f32) -> FactorizedField {
        let dims = GridDims::cube(2).unwrap();
        let b = BoundingBox::new([-1.0; 3], [1.0; 3]).unwrap();
        let d = FactorGroup::filled(1, dims, plane, 1.0 / 3.0).unwrap();
        let c = FactorGroup::filled(1, dims, 0.0, 0.0).unwrap();
        FactorizedField::new(b, d, [c.clone(), c.clone(), c], 100.0).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let t = DAffine3::from_translation(DVec3::new(1.0, 2.0, 3.0));
        let inv = [t, t, t];
        let r = interpolate_inverse([0.2, 0.3, 0.5], [0, 1, 2], &inv);
        assert!((r.translation - t.translation).length() < 1e-12);
        assert!(r.matrix3.abs_diff_eq(DMat3::IDENTITY, 1e-12));
        let inv = [DAffine3::IDENTITY, t, t];
        assert_eq!(interpolate_inverse([1.0, 0.0, 0.0], [0, 1, 2], &inv), DAffine3::IDENTITY);
    }

    #[test]
    fn empty_density_gives_full_transmittance() {
        let f = slab_field(-100.0);
        let ray = Ray { origin: DVec3::new(0.0, 0.0, -5.0), direction: DVec3::Z };
        let cfg = LocalMarchConfig { n_local: 16, half_width: 0.2, background: [0.0; 3] };
        let r = local_march(&ray, 5.0, &DAffine3::IDENTITY, &f, &cfg);
        assert_eq!(r.color, [0.0; 3]);
        assert!((r.transmittance - 1.0).abs() < 1e-9);
    }

    #[test]
    fn opaque_slab_saturates() {
        let f = slab_field(10.0);
        let ray = Ray { origin: DVec3::new(0.0, 0.0, -5.0), direction: DVec3::Z };
        let cfg = LocalMarchConfig { n_local: 16, half_width: 0.2, background: [0.0; 3] };
        let r = local_march(&ray, 5.0, &DAffine3::IDENTITY, &f, &cfg);
        assert!(r.transmittance < 1e-6);
        for c in r.color {
            assert!((c - 0.5).abs() < 1e-6);
        }
    }
}
