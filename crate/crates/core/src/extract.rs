//! Render-based mesh extraction: turntable renders of the field at the rest
//! pose are unprojected into a mask-consistent point cloud, a mask-carved
//! occupancy grid is meshed with marching cubes, simplified, and rigged by
//! copying weights from the nearest template vertex.

use alloc::vec;
use alloc::vec::Vec;

use glam::{DAffine3, DVec3};

use crate::camera::Camera;
use crate::field::FactorizedField;
use crate::mesh::{marching_cubes, ScalarGrid, TriMesh};
use crate::raymarch::{march_canonical, march_deformed, PosedScene, RenderConfig, RenderOutput};
use crate::simplify::{simplify, SimplifyConfig};
use crate::skinning::{BoneAffines, NearestVertexIndex, SkinnedTemplate, SkinningError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractError {
    #[error("no surface found")]
    NoSurface,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("rig has {rig} cameras but {views} views were given")]
    ViewCount { rig: usize, views: usize },
    #[error(transparent)]
    Skinning(#[from] SkinningError),
}

/// Cameras on circles around a center, all looking at it, evenly spaced in
/// azimuth. World +Y is up.
#[derive(Debug, Clone, PartialEq)]
pub struct TurntableRig {
    pub center: DVec3,
    pub radius: f64,
    /// Elevation of each ring, radians.
    pub elevations: Vec<f64>,
    pub views_per_ring: usize,
    pub cameras: Vec<Camera>,
}

impl TurntableRig {
    pub fn new(center: DVec3, radius: f64, elevations: &[f64], views_per_ring: usize, fov_y: f64, width: u32, height: u32) -> Self {
        let mut cameras = Vec::with_capacity(elevations.len() * views_per_ring);
        for (ring, &el) in elevations.iter().enumerate() {
            // stagger rings so views do not stack vertically
            let phase = ring as f64 * 0.5 / views_per_ring as f64;
            for k in 0..views_per_ring {
                let az = 2.0 * core::f64::consts::PI * (k as f64 / views_per_ring as f64 + phase);
                let dir = DVec3::new(libm::cos(el) * libm::sin(az), libm::sin(el), libm::cos(el) * libm::cos(az));
                cameras.push(Camera::look_at(center + radius * dir, center, DVec3::Y, fov_y, width, height));
            }
        }
        Self { center, radius, elevations: elevations.to_vec(), views_per_ring, cameras }
    }

    /// Rig framing a sphere of radius `extent` with some margin.
    pub fn framing(center: DVec3, extent: f64, elevations: &[f64], views_per_ring: usize, size: u32) -> Self {
        let fov = 40f64.to_radians();
        let radius = 1.15 * extent / libm::sin(0.5 * fov);
        Self::new(center, radius, elevations, views_per_ring, fov, size, size)
    }

    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }
}

/// One turntable render with its foreground mask (`opacity > 0.5`).
#[derive(Debug, Clone, PartialEq)]
pub struct TurntableView {
    pub render: RenderOutput,
    pub mask: Vec<bool>,
}

impl TurntableView {
    pub fn from_render(render: RenderOutput) -> Self {
        let mask = render.opacity.iter().map(|o| *o > 0.5).collect();
        Self { render, mask }
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Mask value under the projection of `p`; `None` outside the frustum.
    pub fn mask_at(&self, camera: &Camera, p: DVec3) -> Option<bool> {
        let (u, v, _) = camera.project(p)?;
        if !(u >= 0.0 && v >= 0.0 && u < camera.width as f64 && v < camera.height as f64) {
            return None;
        }
        Some(self.mask[(v as usize) * camera.width as usize + u as usize])
    }
}

pub fn render_view(field: &FactorizedField, camera: &Camera, cfg: &RenderConfig) -> TurntableView {
    TurntableView::from_render(RenderOutput::from_rays(camera, |r| march_canonical(field, r, cfg)))
}

pub fn render_turntable(field: &FactorizedField, rig: &TurntableRig, cfg: &RenderConfig) -> Vec<TurntableView> {
    rig.cameras.iter().map(|c| render_view(field, c, cfg)).collect()
}

/// The template at its rest pose. Every bone affine is the identity there,
/// so the deformed renderer shows the canonical field restricted to the
/// warp shell, which is exactly what posed renders can ever see.
pub fn rest_scene(template: &SkinnedTemplate, tau: f64) -> PosedScene {
    let bones = template.weights.iter().flat_map(|w| w.iter()).map(|(b, _)| b + 1).max().unwrap_or(1);
    PosedScene::from_affines(template, BoneAffines(vec![DAffine3::IDENTITY; bones]), tau)
}

/// [`render_view`] through the deformed renderer at the rest pose, so field
/// content outside the warp shell never reaches the masks.
pub fn render_view_at_rest(field: &FactorizedField, scene: &PosedScene, camera: &Camera, cfg: &RenderConfig) -> TurntableView {
    TurntableView::from_render(RenderOutput::from_rays(camera, |r| march_deformed(field, scene, r, cfg)))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusedPointCloud {
    pub points: Vec<DVec3>,
    pub source_view: Vec<u32>,
}

impl FusedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> Option<(DVec3, DVec3)> {
        let mut it = self.points.iter();
        let first = *it.next()?;
        Some(it.fold((first, first), |(lo, hi), p| (lo.min(*p), hi.max(*p))))
    }
}

/// Inside the mask of every view whose frustum contains `p`.
pub fn inside_all_masks(p: DVec3, views: &[TurntableView], cameras: &[Camera]) -> bool {
    views.iter().zip(cameras).all(|(v, c)| v.mask_at(c, p) != Some(false))
}

/// Lifts every foreground pixel to 3D and keeps the points that every view
/// agrees are foreground. Expected depth is accumulated with unnormalized
/// weights, so it is divided by the opacity to get a surface distance.
pub fn unproject_and_fuse(views: &[TurntableView], rig: &TurntableRig) -> Result<FusedPointCloud, ExtractError> {
    if views.len() != rig.n_views() {
        return Err(ExtractError::ViewCount { rig: rig.n_views(), views: views.len() });
    }
    let mut cloud = FusedPointCloud::default();
    for (vi, (view, cam)) in views.iter().zip(&rig.cameras).enumerate() {
        for py in 0..cam.height {
            for px in 0..cam.width {
                let i = (py * cam.width + px) as usize;
                if !view.mask[i] {
                    continue;
                }
                let t = view.render.depth[i] as f64 / view.render.opacity[i] as f64;
                let p = cam.pixel_ray(px, py).at(t);
                if inside_all_masks(p, views, &rig.cameras) {
                    cloud.points.push(p);
                    cloud.source_view.push(vi as u32);
                }
            }
        }
    }
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceConfig {
    /// Lattice nodes along the longest side of the region.
    pub resolution: usize,
    /// Occupancy threshold on `σ·step`.
    pub iso: f64,
    /// Render step used to turn density into per-step opacity.
    pub step: f64,
}

/// Marching cubes over the carved density. The lattice spans the cloud's
/// bounds plus a two-cell margin and its outer layer is forced empty, so the
/// result is closed.
pub fn reconstruct_surface(
    field: &FactorizedField,
    cloud: &FusedPointCloud,
    rig: &TurntableRig,
    views: &[TurntableView],
    cfg: &SurfaceConfig,
) -> Result<TriMesh, ExtractError> {
    let grid = occupancy_grid(field, cloud, rig, views, cfg)?;
    let mut mesh = marching_cubes(&grid, 0.0);
    mesh.remove_degenerate();
    if mesh.faces.is_empty() {
        return Err(ExtractError::NoSurface);
    }
    Ok(mesh)
}

/// Signed occupancy `σ·step − iso`, negative where carved away.
pub fn occupancy_grid(
    field: &FactorizedField,
    cloud: &FusedPointCloud,
    rig: &TurntableRig,
    views: &[TurntableView],
    cfg: &SurfaceConfig,
) -> Result<ScalarGrid, ExtractError> {
    let (lo, hi) = cloud.bounds().ok_or(ExtractError::EmptyCloud)?;
    if views.len() != rig.n_views() {
        return Err(ExtractError::ViewCount { rig: rig.n_views(), views: views.len() });
    }
    let margin = 2usize;
    let res = cfg.resolution.max(2 * margin + 2);
    let ext = (hi - lo).max(DVec3::splat(1e-9));
    let cell = ext.max_element() / (res - 1 - 2 * margin) as f64;
    let dims = [ext.x, ext.y, ext.z].map(|e| libm::ceil(e / cell) as usize + 1 + 2 * margin);
    let origin = lo - DVec3::splat(margin as f64 * cell);
    let mut occupied = false;
    let grid = ScalarGrid::from_fn(dims, origin, DVec3::splat(cell), |p| {
        let s = field.sample_density(p) * cfg.step - cfg.iso;
        if s > 0.0 && inside_all_masks(p, views, &rig.cameras) {
            occupied = true;
            s
        } else {
            s.min(-cfg.iso * 1e-3)
        }
    });
    if !occupied {
        return Err(ExtractError::NoSurface);
    }
    let mut grid = grid;
    let [nx, ny, nz] = dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1 {
                    let i = grid.index(x, y, z);
                    grid.values[i] = grid.values[i].min(-cfg.iso);
                }
            }
        }
    }
    Ok(grid)
}

/// Copies each vertex's weight row from its nearest template vertex.
pub fn transfer_rig(mesh: &TriMesh, template: &SkinnedTemplate) -> Result<SkinnedTemplate, ExtractError> {
    let pts: Vec<DVec3> = template.positions().collect();
    let cell = match crate::field::BoundingBox::around(pts.iter().copied()) {
        Some(b) => b.diagonal() / 64.0,
        None => 0.0,
    };
    let index = NearestVertexIndex::build(&pts, cell)?;
    let weights = mesh.vertices.iter().map(|v| template.weights[index.nearest(*v).0]).collect();
    let vertices = mesh.vertices.iter().map(|v| v.as_vec3().to_array()).collect();
    Ok(SkinnedTemplate::new(vertices, mesh.faces.clone(), weights)?)
}

/// Field color at each vertex, for visualization.
pub fn vertex_colors(field: &FactorizedField, mesh: &TriMesh) -> Vec<[f32; 3]> {
    mesh.vertices.iter().map(|v| field.sample_color(*v).map(|c| c as f32)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    pub views_per_ring: usize,
    pub elevations: Vec<f64>,
    pub image_size: u32,
    pub render: RenderConfig,
    pub resolution: usize,
    pub iso: f64,
    pub target_faces: usize,
    pub max_simplify_error: Option<f64>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            views_per_ring: 18,
            elevations: vec![-20f64.to_radians(), 30f64.to_radians()],
            image_size: 128,
            render: RenderConfig::default(),
            resolution: 192,
            iso: 0.5,
            target_faces: 15_000,
            max_simplify_error: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub rig: TurntableRig,
    pub cloud: FusedPointCloud,
    pub raw: TriMesh,
    pub simplified: TriMesh,
    pub rigged: SkinnedTemplate,
}

/// Runs the whole pipeline with views rendered by `render`, which lets the
/// caller parallelize across views.
pub fn extract_with(
    field: &FactorizedField,
    template: &SkinnedTemplate,
    cfg: &ExtractConfig,
    render: impl FnOnce(&TurntableRig, &PosedScene) -> Vec<TurntableView>,
) -> Result<Extraction, ExtractError> {
    let bbox = field.bbox();
    let rig = TurntableRig::framing(bbox.center(), 0.5 * bbox.diagonal(), &cfg.elevations, cfg.views_per_ring, cfg.image_size);
    let views = render(&rig, &rest_scene(template, cfg.render.tau));
    let cloud = unproject_and_fuse(&views, &rig)?;
    let surface = SurfaceConfig { resolution: cfg.resolution, iso: cfg.iso, step: cfg.render.nominal_step(bbox) };
    let raw = reconstruct_surface(field, &cloud, &rig, &views, &surface)?;
    let simplified = simplify(&raw, &SimplifyConfig { target_faces: cfg.target_faces, max_error: cfg.max_simplify_error });
    let rigged = transfer_rig(&simplified, template)?;
    Ok(Extraction { rig, cloud, raw, simplified, rigged })
}

pub fn extract(field: &FactorizedField, template: &SkinnedTemplate, cfg: &ExtractConfig) -> Result<Extraction, ExtractError> {
    extract_with(field, template, cfg, |rig, scene| {
        rig.cameras.iter().map(|c| render_view_at_rest(field, scene, c, &cfg.render)).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{BoundingBox, GridDims};
    use crate::skinning::VertexWeights;
    use crate::synth::sphere_phantom;

    fn phantom() -> (FactorizedField, RenderConfig) {
        let cfg = RenderConfig { n_samples: 96, ..RenderConfig::default() };
        let bbox = BoundingBox::new([-1.0; 3], [1.0; 3]).unwrap();
        let field = sphere_phantom(&bbox, GridDims::cube(48).unwrap(), 0.6, cfg.nominal_step(&bbox), [0.8, 0.4, 0.2]);
        (field, cfg)
    }

    /// Raw density −3 everywhere: σ = softplus(−300), zero for all purposes.
    fn emptied(field: &FactorizedField) -> FactorizedField {
        let mut f = FactorizedField::new(*field.bbox(), field.density().clone(), field.color().clone(), 100.0).unwrap();
        for (k, t) in f.density_mut().factors_mut().iter_mut() {
            let plane = matches!(k, crate::field::Factor::PlaneYx | crate::field::Factor::PlaneYz | crate::field::Factor::PlaneXz);
            t.fill(if plane { -1.0 } else { 1.0 });
        }
        f
    }

    #[test]
    fn empty_field_gives_empty_masks() {
        let (field, cfg) = phantom();
        let rig = TurntableRig::framing(DVec3::ZERO, 1.0, &[0.3], 3, 16);
        for v in render_turntable(&emptied(&field), &rig, &cfg) {
            assert_eq!(v.foreground(), 0);
        }
    }

    #[test]
    fn sphere_phantom_fuses_near_surface() {
        let (field, cfg) = phantom();
        let rig = TurntableRig::framing(DVec3::ZERO, 1.0, &[-0.35, 0.35], 8, 48);
        let views = render_turntable(&field, &rig, &cfg);
        let cloud = unproject_and_fuse(&views, &rig).unwrap();
        assert!(cloud.len() > 1000);
        let step = cfg.nominal_step(field.bbox());
        for p in &cloud.points {
            assert!((p.length() - 0.6).abs() < 2.0 * step, "point at radius {}", p.length());
        }
    }

    #[test]
    fn floater_outside_one_mask_is_vetoed() {
        let (field, cfg) = phantom();
        let rig = TurntableRig::framing(DVec3::ZERO, 1.0, &[0.0], 4, 32);
        let views = render_turntable(&field, &rig, &cfg);
        assert!(inside_all_masks(DVec3::ZERO, &views, &rig.cameras));
        // visible in front of the sphere from one side, off the silhouette from the side views
        assert!(!inside_all_masks(DVec3::new(0.9, 0.0, 0.0), &views, &rig.cameras));
    }

    #[test]
    fn sphere_surface_within_tolerance() {
        let (field, cfg) = phantom();
        let rig = TurntableRig::framing(DVec3::ZERO, 1.0, &[-0.35, 0.35], 8, 64);
        let views = render_turntable(&field, &rig, &cfg);
        let cloud = unproject_and_fuse(&views, &rig).unwrap();
        let sc = SurfaceConfig { resolution: 40, iso: 0.5, step: cfg.nominal_step(field.bbox()) };
        let grid = occupancy_grid(&field, &cloud, &rig, &views, &sc).unwrap();
        let mesh = reconstruct_surface(&field, &cloud, &rig, &views, &sc).unwrap();
        assert!(mesh.is_closed());
        assert_eq!(mesh.euler_characteristic(), 2);
        let tol = 1.5 * grid.voxel_diagonal();
        for v in &mesh.vertices {
            assert!((v.length() - 0.6).abs() <= tol);
        }
    }

    #[test]
    fn zero_density_reports_no_surface() {
        let (field, cfg) = phantom();
        let rig = TurntableRig::framing(DVec3::ZERO, 1.0, &[0.0], 4, 32);
        let views = render_turntable(&field, &rig, &cfg);
        let cloud = unproject_and_fuse(&views, &rig).unwrap();
        let empty = emptied(&field);
        let sc = SurfaceConfig { resolution: 16, iso: 0.5, step: cfg.nominal_step(field.bbox()) };
        assert!(matches!(reconstruct_surface(&empty, &cloud, &rig, &views, &sc), Err(ExtractError::NoSurface)));
    }

    #[test]
    fn transfer_copies_nearest_rows() {
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let weights = vec![VertexWeights::one_hot(0), VertexWeights::one_hot(1), VertexWeights::from_dense(&[0.5, 0.5])];
        let t = SkinnedTemplate::new(verts, vec![[0, 1, 2]], weights).unwrap();
        let mesh = TriMesh {
            vertices: vec![DVec3::new(0.9, 0.1, 0.0), DVec3::new(0.0, 1.0, 0.0), DVec3::new(0.1, 0.0, 0.0)],
            faces: vec![[0, 1, 2]],
        };
        let r = transfer_rig(&mesh, &t).unwrap();
        assert_eq!(r.weights, vec![t.weights[1], t.weights[2], t.weights[0]]);
    }
}
